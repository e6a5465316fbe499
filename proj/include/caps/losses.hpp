#pragma once

#include <string>
#include <vector>

#include "caps/ops.hpp"
#include "caps/tape.hpp"
#include "caps/tensor.hpp"

namespace caps {

struct LossConfig {
    double m_plus = 0.9;
    double m_minus = 0.1;
    double lambda_down = 0.5;  // down-weight for absent classes
    double beta = 0.0005;      // reconstruction weight

    void validate() const {
        if (!(0.0 <= m_minus && m_minus < m_plus && m_plus <= 1.0)) {
            throw ConfigError("loss: need 0 <= m_minus < m_plus <= 1");
        }
        if (lambda_down < 0.0) throw ConfigError("loss: lambda_down must be >= 0");
        if (beta < 0.0) throw ConfigError("loss: beta must be >= 0");
    }
};

// Batch mean of
//   sum_j [ T_j * max(0, m+ - |u_j|)^2 + lambda * (1 - T_j) * max(0, |u_j| - m-)^2 ]
// with T_j the one-hot target indicator.
template <typename T>
Tensor<T> margin_loss(Tape<T>& tape, const Tensor<T>& class_poses, const std::vector<int>& targets,
                      const LossConfig& cfg) {
    cfg.validate();
    if (class_poses.rank() != 3) throw ShapeError("margin_loss: want class poses [B,J,D]");
    const std::size_t bs = class_poses.dim(0);
    const std::size_t n_j = class_poses.dim(1);
    if (targets.size() != bs) throw ShapeError("margin_loss: targets size != batch");
    for (int t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= n_j) {
            throw DataError("margin_loss: label " + std::to_string(t) + " out of range [0, " +
                            std::to_string(n_j) + ")");
        }
    }
    Tensor<T> present({bs, n_j});
    Tensor<T> absent({bs, n_j});
    for (std::size_t b = 0; b < bs; ++b) {
        for (std::size_t j = 0; j < n_j; ++j) {
            const bool hit = static_cast<std::size_t>(targets[b]) == j;
            present[b * n_j + j] = hit ? T(1) : T(0);
            absent[b * n_j + j] = hit ? T(0) : static_cast<T>(cfg.lambda_down);
        }
    }
    const Tensor<T> norms = ops::norm_lastdim(tape, class_poses);  // [B, J]
    const Tensor<T> lo = ops::relu(tape, ops::affine(tape, norms, T(-1), static_cast<T>(cfg.m_plus)));
    const Tensor<T> hi = ops::relu(tape, ops::affine(tape, norms, T(1), static_cast<T>(-cfg.m_minus)));
    const Tensor<T> terms = ops::add(tape, ops::mul_const(tape, ops::mul(tape, lo, lo), present),
                                     ops::mul_const(tape, ops::mul(tape, hi, hi), absent));
    return ops::affine(tape, ops::sum_all(tape, terms), static_cast<T>(1.0 / bs), T(0));
}

// Batch mean of the per-sample sum of squared differences.
template <typename T>
Tensor<T> reconstruction_loss(Tape<T>& tape, const Tensor<T>& recon, const Tensor<T>& images) {
    if (recon.rank() != 2) throw ShapeError("reconstruction_loss: want recon [B, pixels]");
    const std::size_t bs = recon.dim(0);
    if (images.size() != recon.size() || images.dim(0) != bs) {
        throw ShapeError("reconstruction_loss: image size " + shape_str(images.shape()) +
                         " does not match reconstruction " + shape_str(recon.shape()));
    }
    const Tensor<T> flat(recon.shape(), images.vals());
    const Tensor<T> diff = ops::sub_const(tape, recon, flat);
    const Tensor<T> sq = ops::mul(tape, diff, diff);
    return ops::affine(tape, ops::sum_all(tape, sq), static_cast<T>(1.0 / bs), T(0));
}

// margin + beta * recon; an undefined recon (decoder disabled) contributes
// nothing regardless of beta.
template <typename T>
Tensor<T> total_loss(Tape<T>& tape, const Tensor<T>& margin, const Tensor<T>& recon, double beta) {
    if (!recon.defined() || beta == 0.0) return margin;
    return ops::add(tape, margin, ops::affine(tape, recon, static_cast<T>(beta), T(0)));
}

}  // namespace caps
