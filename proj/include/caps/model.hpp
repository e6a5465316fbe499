#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "caps/error.hpp"
#include "caps/rng.hpp"
#include "caps/tensor.hpp"

namespace caps {

// Architecture knobs. Defaults follow the reference layout: a 9x9 stride-1
// conv backbone, a 9x9 stride-2 primary-capsule conv, and one fully connected
// class-capsule layer.
struct ModelConfig {
    std::size_t in_channels = 1;
    std::size_t in_h = 28;
    std::size_t in_w = 28;
    std::size_t conv1_channels = 256;
    std::size_t conv1_kernel = 9;
    std::size_t conv1_stride = 1;
    std::size_t primary_kernel = 9;
    std::size_t primary_stride = 2;
    std::size_t capsule_types = 1;  // O
    std::size_t d_primary = 2;      // D1
    std::size_t d_class = 4;        // D2
    std::size_t num_classes = 10;   // J
    bool decoder = false;
    std::size_t decoder_hidden1 = 512;
    std::size_t decoder_hidden2 = 1024;

    std::size_t conv1_out_h() const { return (in_h - conv1_kernel) / conv1_stride + 1; }
    std::size_t conv1_out_w() const { return (in_w - conv1_kernel) / conv1_stride + 1; }
    std::size_t grid_m() const { return (conv1_out_h() - primary_kernel) / primary_stride + 1; }
    std::size_t grid_n() const { return (conv1_out_w() - primary_kernel) / primary_stride + 1; }
    std::size_t num_primary() const { return grid_m() * grid_n() * capsule_types; }
    std::size_t pixels() const { return in_h * in_w; }

    void validate() const {
        const std::size_t min_h = conv1_kernel + conv1_stride * (primary_kernel - 1);
        const std::size_t min_w = min_h;
        if (in_h < min_h || in_w < min_w) {
            throw ConfigError("model: input " + std::to_string(in_h) + "x" + std::to_string(in_w) +
                              " too small for two valid convolutions; need at least " +
                              std::to_string(min_h) + "x" + std::to_string(min_w));
        }
        if (conv1_channels == 0 || capsule_types == 0 || d_primary == 0 || d_class == 0 ||
            num_classes == 0) {
            throw ConfigError("model: channel/capsule dimensions must be positive");
        }
        if (conv1_stride == 0 || primary_stride == 0) {
            throw ConfigError("model: strides must be >= 1");
        }
    }
};

// Number of channel-wise primary capsules a bottleneck of S channels yields
// for D1-dimensional capsules: floor(S / D1).
inline std::size_t num_primary_caps(std::size_t bottleneck_channels, std::size_t d_primary) {
    if (d_primary == 0) throw ConfigError("num_primary_caps: capsule dimension must be positive");
    return bottleneck_channels / d_primary;
}

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T>* tensor;
    std::vector<std::uint8_t>* frozen;  // nullptr when the tensor is not prunable
};

// Conv backbone + primary-capsule conv + class-capsule transforms, with an
// optional reconstruction decoder. Weights are read-only during forward and
// backward; the optimizer is the single writer between steps.
template <typename T>
struct CapsNetModel {
    ModelConfig cfg;

    Tensor<T> conv1_w;    // [F, C, k, k]
    Tensor<T> conv1_b;    // [F]
    Tensor<T> primary_w;  // [O*D1, F, k, k]
    Tensor<T> primary_b;  // [O*D1]
    Tensor<T> w_class;    // [I, J, D1, D2]
    Tensor<T> b_prior;    // [I, J], constant zeros (re-initialized every forward pass)

    Tensor<T> dec_w1, dec_b1, dec_w2, dec_b2, dec_w3, dec_b3;

    // Frozen-zero masks for the prunable tensors; 1 marks an entry pinned at
    // exactly zero.
    std::vector<std::uint8_t> frozen_conv1, frozen_primary, frozen_w;

    static CapsNetModel init(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        CapsNetModel m;
        m.cfg = cfg;
        const std::size_t f = cfg.conv1_channels;
        const std::size_t pc = cfg.capsule_types * cfg.d_primary;
        m.conv1_w = Tensor<T>({f, cfg.in_channels, cfg.conv1_kernel, cfg.conv1_kernel}, true);
        m.conv1_b = Tensor<T>({f}, true);
        m.primary_w = Tensor<T>({pc, f, cfg.primary_kernel, cfg.primary_kernel}, true);
        m.primary_b = Tensor<T>({pc}, true);
        m.w_class = Tensor<T>({cfg.num_primary(), cfg.num_classes, cfg.d_primary, cfg.d_class}, true);
        m.b_prior = Tensor<T>({cfg.num_primary(), cfg.num_classes}, false);

        fill_uniform_glorot(m.conv1_w, cfg.in_channels * cfg.conv1_kernel * cfg.conv1_kernel,
                            f * cfg.conv1_kernel * cfg.conv1_kernel, rng);
        fill_uniform_glorot(m.primary_w, f * cfg.primary_kernel * cfg.primary_kernel,
                            pc * cfg.primary_kernel * cfg.primary_kernel, rng);
        for (auto& v : m.w_class.vals()) v = static_cast<T>(rng.normal(0.0, 0.01));

        if (cfg.decoder) {
            const std::size_t n_in = cfg.num_classes * cfg.d_class;
            m.dec_w1 = Tensor<T>({n_in, cfg.decoder_hidden1}, true);
            m.dec_b1 = Tensor<T>({cfg.decoder_hidden1}, true);
            m.dec_w2 = Tensor<T>({cfg.decoder_hidden1, cfg.decoder_hidden2}, true);
            m.dec_b2 = Tensor<T>({cfg.decoder_hidden2}, true);
            m.dec_w3 = Tensor<T>({cfg.decoder_hidden2, cfg.pixels()}, true);
            m.dec_b3 = Tensor<T>({cfg.pixels()}, true);
            fill_uniform_glorot(m.dec_w1, n_in, cfg.decoder_hidden1, rng);
            fill_uniform_glorot(m.dec_w2, cfg.decoder_hidden1, cfg.decoder_hidden2, rng);
            fill_uniform_glorot(m.dec_w3, cfg.decoder_hidden2, cfg.pixels(), rng);
        }

        m.frozen_conv1.assign(m.conv1_w.size(), 0);
        m.frozen_primary.assign(m.primary_w.size(), 0);
        m.frozen_w.assign(m.w_class.size(), 0);
        return m;
    }

    // Trainable parameters in a fixed order; optimizer state and checkpoints
    // rely on this ordering.
    std::vector<NamedParam<T>> named_params() {
        std::vector<NamedParam<T>> out = {
            {"conv1_w", &conv1_w, &frozen_conv1}, {"conv1_b", &conv1_b, nullptr},
            {"primary_w", &primary_w, &frozen_primary}, {"primary_b", &primary_b, nullptr},
            {"w_class", &w_class, &frozen_w},
        };
        if (cfg.decoder) {
            out.push_back({"dec_w1", &dec_w1, nullptr});
            out.push_back({"dec_b1", &dec_b1, nullptr});
            out.push_back({"dec_w2", &dec_w2, nullptr});
            out.push_back({"dec_b2", &dec_b2, nullptr});
            out.push_back({"dec_w3", &dec_w3, nullptr});
            out.push_back({"dec_b3", &dec_b3, nullptr});
        }
        return out;
    }

    void zero_grad() {
        for (auto& p : named_params()) p.tensor->zero_grad();
    }

    CapsNetModel clone() const {
        CapsNetModel m;
        m.cfg = cfg;
        m.conv1_w = conv1_w.clone();
        m.conv1_b = conv1_b.clone();
        m.primary_w = primary_w.clone();
        m.primary_b = primary_b.clone();
        m.w_class = w_class.clone();
        m.b_prior = b_prior.clone();
        if (cfg.decoder) {
            m.dec_w1 = dec_w1.clone();
            m.dec_b1 = dec_b1.clone();
            m.dec_w2 = dec_w2.clone();
            m.dec_b2 = dec_b2.clone();
            m.dec_w3 = dec_w3.clone();
            m.dec_b3 = dec_b3.clone();
        }
        m.frozen_conv1 = frozen_conv1;
        m.frozen_primary = frozen_primary;
        m.frozen_w = frozen_w;
        return m;
    }

private:
    static void fill_uniform_glorot(Tensor<T>& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (auto& v : t.vals()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
};

// Fraction of prunable parameters (conv kernels and class transforms; biases
// excluded) that are exactly zero.
template <typename T>
double model_sparsity(const CapsNetModel<T>& m) {
    std::size_t zeros = 0, total = 0;
    for (const Tensor<T>* t : {&m.conv1_w, &m.primary_w, &m.w_class}) {
        total += t->size();
        for (std::size_t i = 0; i < t->size(); ++i) {
            if ((*t)[i] == T(0)) ++zeros;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
}

}  // namespace caps
