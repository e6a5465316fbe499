#pragma once

#include <cstddef>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "caps/capsnet.hpp"
#include "caps/data.hpp"
#include "caps/model.hpp"
#include "caps/training.hpp"

namespace caps {

// Uniform quantizer over [0, 1]: K levels {k/(K-1)}, index by round-half-up.
// Inputs outside [0, 1] are clamped (callers count the clamps).
int quantize(double c, int levels);
double quantize_level(int index, int levels);

enum class LabelSource { Predicted, True };

// Per-class associative map from quantized-coupling strings to occurrence
// counts. Keys are the '-'-joined decimal level indices of the coupling
// column for the sample's class, in the fixed capsule flattening order.
struct ParseTreeDictionary {
    int num_classes = 0;
    int levels = 11;
    std::vector<std::map<std::string, std::size_t>> counts;
    std::vector<std::size_t> samples;
    std::size_t clamped = 0;  // coupling values that fell outside [0, 1]

    void init(int classes, int k);
    void add(int label, const std::string& key);
    // Counting is associative and commutative, so building per partition and
    // merging equals building over the whole set.
    void merge(const ParseTreeDictionary& other);
};

std::string coupling_key(const std::vector<double>& column, int levels, std::size_t* clamped);

double class_entropy(const ParseTreeDictionary& dict, int j);  // bits

struct EntropyReport {
    int levels = 11;
    double model_sparsity = 0;
    std::vector<std::size_t> samples;   // per class
    std::vector<std::size_t> keys;      // per class
    std::vector<double> entropy_bits;   // per class; 0 for empty classes
    double mean_bits = 0;               // over non-empty classes
};

EntropyReport entropy_report(const ParseTreeDictionary& dict, double sparsity);
void write_entropy_csv(const EntropyReport& rep, std::ostream& os);

struct SaliencyMap {
    std::size_t grid_h = 0, grid_w = 0;
    std::vector<double> grid;
    std::size_t image_h = 0, image_w = 0;
    std::vector<double> upsampled;
};

// Grid cell (m, n) averages pose-norm-weighted quantized couplings toward the
// predicted class over the O capsule types; the copy at image resolution uses
// corner-aligned bilinear interpolation.
SaliencyMap saliency_from(const std::vector<double>& pose_norms,
                          const std::vector<double>& quantized_couplings, std::size_t grid_m,
                          std::size_t grid_n, std::size_t o_types, std::size_t image_h,
                          std::size_t image_w);

void write_pgm(const std::string& path, std::size_t w, std::size_t h,
               const std::vector<double>& values);

template <typename T>
ParseTreeDictionary build_dictionary(const CapsNetModel<T>& model, const Dataset& ds, int levels,
                                     LabelSource source, int r, std::size_t batch_size = 256) {
    if (levels < 2) throw ConfigError("build_dictionary: need at least 2 quantization levels");
    if (r < 1) throw ConfigError("build_dictionary: routing iterations must be >= 1");
    ParseTreeDictionary dict;
    dict.init(model.cfg.num_classes, levels);
    const std::size_t n_i = model.cfg.num_primary();
    const std::size_t n_j = model.cfg.num_classes;
    std::vector<std::size_t> idx(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i) idx[i] = i;
    for (std::size_t begin = 0; begin < ds.n; begin += batch_size) {
        const std::size_t end = std::min(ds.n, begin + batch_size);
        Tape<T> tape(false);
        const Tensor<T> images = batch_tensor<T>(ds, idx, begin, end);
        const ForwardResult<T> fwd = capsnet_forward(tape, images, model, RoutingOptions{r, false});
        const std::vector<int> pred = predict(fwd.class_poses);
        for (std::size_t b = 0; b < end - begin; ++b) {
            const int label = source == LabelSource::Predicted
                                  ? pred[b]
                                  : ds.labels[begin + b];
            std::vector<double> column(n_i);
            for (std::size_t i = 0; i < n_i; ++i) {
                column[i] = static_cast<double>(
                    fwd.couplings[(b * n_i + i) * n_j + static_cast<std::size_t>(label)]);
            }
            dict.add(label, coupling_key(column, levels, &dict.clamped));
        }
    }
    return dict;
}

template <typename T>
SaliencyMap saliency_map(const CapsNetModel<T>& model, const Tensor<T>& image, int levels, int r) {
    if (levels < 2) throw ConfigError("saliency_map: need at least 2 quantization levels");
    Tape<T> tape(false);
    Tensor<T> batch({1, model.cfg.in_channels, model.cfg.in_h, model.cfg.in_w}, image.vals());
    const ForwardResult<T> fwd = capsnet_forward(tape, batch, model, RoutingOptions{r, false});
    const int j_hat = predict(fwd.class_poses)[0];
    const std::size_t n_i = model.cfg.num_primary();
    const std::size_t n_j = model.cfg.num_classes;
    const std::size_t d1 = model.cfg.d_primary;
    std::vector<double> norms(n_i), quantized(n_i);
    std::size_t clamped = 0;
    for (std::size_t i = 0; i < n_i; ++i) {
        double q = 0;
        for (std::size_t d = 0; d < d1; ++d) {
            const double x = static_cast<double>(fwd.primary_poses[i * d1 + d]);
            q += x * x;
        }
        norms[i] = std::sqrt(q);
        const double c = static_cast<double>(fwd.couplings[i * n_j + static_cast<std::size_t>(j_hat)]);
        if (c < 0.0 || c > 1.0) ++clamped;
        quantized[i] = quantize_level(quantize(c, levels), levels);
    }
    return saliency_from(norms, quantized, model.cfg.grid_m(), model.cfg.grid_n(),
                         model.cfg.capsule_types, model.cfg.in_h, model.cfg.in_w);
}

// Backtracking graph: edges (p_i -> class_j_hat) whose quantized coupling is
// at least `threshold`; primary nodes appear only when they carry an edge.
template <typename T>
std::string parse_tree_dot(const CapsNetModel<T>& model, const Tensor<T>& image, double threshold,
                           int levels, int r) {
    if (levels < 2) throw ConfigError("parse_tree_dot: need at least 2 quantization levels");
    Tape<T> tape(false);
    Tensor<T> batch({1, model.cfg.in_channels, model.cfg.in_h, model.cfg.in_w}, image.vals());
    const ForwardResult<T> fwd = capsnet_forward(tape, batch, model, RoutingOptions{r, false});
    const int j_hat = predict(fwd.class_poses)[0];
    const std::size_t n_i = model.cfg.num_primary();
    const std::size_t n_j = model.cfg.num_classes;
    const std::size_t d1 = model.cfg.d_primary;
    const std::size_t d2 = model.cfg.d_class;

    double class_act = 0;
    for (std::size_t d = 0; d < d2; ++d) {
        const double x =
            static_cast<double>(fwd.class_poses[static_cast<std::size_t>(j_hat) * d2 + d]);
        class_act += x * x;
    }
    class_act = std::sqrt(class_act);

    std::vector<std::pair<std::size_t, double>> edges;  // (i, quantized coupling)
    for (std::size_t i = 0; i < n_i; ++i) {
        const double c = static_cast<double>(fwd.couplings[i * n_j + static_cast<std::size_t>(j_hat)]);
        const double cq = quantize_level(quantize(c, levels), levels);
        if (cq >= threshold) edges.emplace_back(i, cq);
    }

    auto fmt = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        return std::string(buf);
    };
    std::string dot = "digraph parse_tree {\n";
    dot += "  \"class_" + std::to_string(j_hat) + "\" [activation=" + fmt(class_act) + "];\n";
    for (const auto& [i, cq] : edges) {
        double q = 0;
        for (std::size_t d = 0; d < d1; ++d) {
            const double x = static_cast<double>(fwd.primary_poses[i * d1 + d]);
            q += x * x;
        }
        dot += "  \"p_" + std::to_string(i) + "\" [activation=" + fmt(std::sqrt(q)) + "];\n";
    }
    for (const auto& [i, cq] : edges) {
        dot += "  \"p_" + std::to_string(i) + "\" -> \"class_" + std::to_string(j_hat) +
               "\" [weight=" + fmt(cq) + "];\n";
    }
    dot += "}\n";
    return dot;
}

// CSV rows `sample,i,j,c` with the continuous couplings of the final routing
// pass, for external verification.
template <typename T>
void dump_couplings_csv(const CapsNetModel<T>& model, const Dataset& ds, int r, std::ostream& os,
                        std::size_t batch_size = 256) {
    const std::size_t n_i = model.cfg.num_primary();
    const std::size_t n_j = model.cfg.num_classes;
    std::vector<std::size_t> idx(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i) idx[i] = i;
    os << "sample,i,j,c\n";
    char buf[48];
    for (std::size_t begin = 0; begin < ds.n; begin += batch_size) {
        const std::size_t end = std::min(ds.n, begin + batch_size);
        Tape<T> tape(false);
        const Tensor<T> images = batch_tensor<T>(ds, idx, begin, end);
        const ForwardResult<T> fwd = capsnet_forward(tape, images, model, RoutingOptions{r, false});
        for (std::size_t b = 0; b < end - begin; ++b) {
            for (std::size_t i = 0; i < n_i; ++i) {
                for (std::size_t j = 0; j < n_j; ++j) {
                    std::snprintf(buf, sizeof(buf), "%.9g",
                                  static_cast<double>(fwd.couplings[(b * n_i + i) * n_j + j]));
                    os << (begin + b) << ',' << i << ',' << j << ',' << buf << '\n';
                }
            }
        }
    }
}

}  // namespace caps
