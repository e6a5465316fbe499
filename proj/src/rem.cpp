#include "caps/rem.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace caps {

int quantize(double c, int levels) {
    if (levels < 2) throw ConfigError("quantize: need at least 2 levels");
    const double clamped = std::min(1.0, std::max(0.0, c));
    return static_cast<int>(std::floor(clamped * (levels - 1) + 0.5));  // half rounds up
}

double quantize_level(int index, int levels) {
    if (levels < 2) throw ConfigError("quantize_level: need at least 2 levels");
    if (index < 0 || index >= levels) throw UsageError("quantize_level: index out of range");
    return static_cast<double>(index) / static_cast<double>(levels - 1);
}

void ParseTreeDictionary::init(int classes, int k) {
    num_classes = classes;
    levels = k;
    counts.assign(static_cast<std::size_t>(classes), {});
    samples.assign(static_cast<std::size_t>(classes), 0);
    clamped = 0;
}

void ParseTreeDictionary::add(int label, const std::string& key) {
    if (label < 0 || label >= num_classes) {
        throw DataError("ParseTreeDictionary::add: label out of range");
    }
    ++counts[static_cast<std::size_t>(label)][key];
    ++samples[static_cast<std::size_t>(label)];
}

void ParseTreeDictionary::merge(const ParseTreeDictionary& other) {
    if (other.num_classes != num_classes || other.levels != levels) {
        throw UsageError("ParseTreeDictionary::merge: incompatible dictionaries");
    }
    for (std::size_t j = 0; j < counts.size(); ++j) {
        for (const auto& [key, count] : other.counts[j]) counts[j][key] += count;
        samples[j] += other.samples[j];
    }
    clamped += other.clamped;
}

std::string coupling_key(const std::vector<double>& column, int levels, std::size_t* clamped) {
    std::string key;
    key.reserve(column.size() * 3);
    for (std::size_t i = 0; i < column.size(); ++i) {
        if (clamped != nullptr && (column[i] < 0.0 || column[i] > 1.0)) ++*clamped;
        if (i) key += '-';
        key += std::to_string(quantize(column[i], levels));
    }
    return key;
}

double class_entropy(const ParseTreeDictionary& dict, int j) {
    if (j < 0 || j >= dict.num_classes) throw UsageError("class_entropy: class out of range");
    const std::size_t total = dict.samples[static_cast<std::size_t>(j)];
    if (total == 0) throw DataError("class_entropy: class " + std::to_string(j) + " has no samples");
    double h = 0;
    for (const auto& [key, count] : dict.counts[static_cast<std::size_t>(j)]) {
        const double p = static_cast<double>(count) / static_cast<double>(total);
        h -= p * std::log2(p);
    }
    return std::max(0.0, h);
}

EntropyReport entropy_report(const ParseTreeDictionary& dict, double sparsity) {
    EntropyReport rep;
    rep.levels = dict.levels;
    rep.model_sparsity = sparsity;
    rep.samples = dict.samples;
    rep.keys.resize(dict.counts.size());
    rep.entropy_bits.assign(dict.counts.size(), 0.0);
    double sum = 0;
    std::size_t nonempty = 0;
    for (std::size_t j = 0; j < dict.counts.size(); ++j) {
        rep.keys[j] = dict.counts[j].size();
        if (dict.samples[j] > 0) {
            rep.entropy_bits[j] = class_entropy(dict, static_cast<int>(j));
            sum += rep.entropy_bits[j];
            ++nonempty;
        }
    }
    if (nonempty == 0) throw DataError("entropy_report: every class is empty");
    rep.mean_bits = sum / static_cast<double>(nonempty);
    return rep;
}

void write_entropy_csv(const EntropyReport& rep, std::ostream& os) {
    os << "class,samples,keys,entropy_bits\n";
    char buf[32];
    std::size_t total_samples = 0, total_keys = 0;
    for (std::size_t j = 0; j < rep.entropy_bits.size(); ++j) {
        std::snprintf(buf, sizeof(buf), "%.6f", rep.entropy_bits[j]);
        os << j << ',' << rep.samples[j] << ',' << rep.keys[j] << ',' << buf << '\n';
        total_samples += rep.samples[j];
        total_keys += rep.keys[j];
    }
    std::snprintf(buf, sizeof(buf), "%.6f", rep.mean_bits);
    os << "mean," << total_samples << ',' << total_keys << ',' << buf << '\n';
}

SaliencyMap saliency_from(const std::vector<double>& pose_norms,
                          const std::vector<double>& quantized_couplings, std::size_t grid_m,
                          std::size_t grid_n, std::size_t o_types, std::size_t image_h,
                          std::size_t image_w) {
    const std::size_t n_i = grid_m * grid_n * o_types;
    if (pose_norms.size() != n_i || quantized_couplings.size() != n_i) {
        throw UsageError("saliency_from: input sizes do not match the grid");
    }
    SaliencyMap map;
    map.grid_h = grid_m;
    map.grid_w = grid_n;
    map.grid.assign(grid_m * grid_n, 0.0);
    for (std::size_t m = 0; m < grid_m; ++m) {
        for (std::size_t n = 0; n < grid_n; ++n) {
            double acc = 0;
            for (std::size_t o = 0; o < o_types; ++o) {
                const std::size_t i = (m * grid_n + n) * o_types + o;
                acc += pose_norms[i] * quantized_couplings[i];
            }
            map.grid[m * grid_n + n] = acc / static_cast<double>(o_types);
        }
    }
    map.image_h = image_h;
    map.image_w = image_w;
    map.upsampled.assign(image_h * image_w, 0.0);
    for (std::size_t y = 0; y < image_h; ++y) {
        const double sy = image_h > 1 ? static_cast<double>(y) * (grid_m - 1) / (image_h - 1) : 0.0;
        const std::size_t y0 = std::min(grid_m - 1, static_cast<std::size_t>(sy));
        const std::size_t y1 = std::min(grid_m - 1, y0 + 1);
        const double fy = sy - static_cast<double>(y0);
        for (std::size_t x = 0; x < image_w; ++x) {
            const double sx =
                image_w > 1 ? static_cast<double>(x) * (grid_n - 1) / (image_w - 1) : 0.0;
            const std::size_t x0 = std::min(grid_n - 1, static_cast<std::size_t>(sx));
            const std::size_t x1 = std::min(grid_n - 1, x0 + 1);
            const double fx = sx - static_cast<double>(x0);
            const double v00 = map.grid[y0 * grid_n + x0];
            const double v01 = map.grid[y0 * grid_n + x1];
            const double v10 = map.grid[y1 * grid_n + x0];
            const double v11 = map.grid[y1 * grid_n + x1];
            map.upsampled[y * image_w + x] =
                (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
        }
    }
    return map;
}

void write_pgm(const std::string& path, std::size_t w, std::size_t h,
               const std::vector<double>& values) {
    if (values.size() != w * h) throw UsageError("write_pgm: value count does not match dims");
    std::ofstream os(path);
    if (!os) throw DataError("write_pgm: cannot open " + path);
    os << "P2\n" << w << ' ' << h << "\n255\n";
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double v = std::min(1.0, std::max(0.0, values[y * w + x]));
            os << static_cast<int>(std::lround(v * 255.0));
            os << (x + 1 == w ? '\n' : ' ');
        }
    }
}

}  // namespace caps
