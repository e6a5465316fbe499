#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "caps/error.hpp"
#include "caps/model.hpp"

namespace caps {

enum class OptKind { Sgd, Adam };

struct OptimizerConfig {
    OptKind kind = OptKind::Adam;
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct LobsterConfig {
    bool enabled = false;
    double lambda = 1e-4;      // weight of the gradient-gated shrink term
    double threshold = 1e-3;   // |theta| below this is zeroed and frozen at epoch end

    void validate() const {
        if (lambda < 0.0) throw ConfigError("lobster: lambda must be >= 0");
        if (threshold < 0.0) throw ConfigError("lobster: threshold must be >= 0");
    }
};

// One element of the gradient-gated shrinking update:
//   theta' = theta - eta*G - lambda * theta * ReLU(1 - |grad|)
// where eta*G is the plain optimizer displacement for this entry. Gradients
// with magnitude >= 1 close the gate and leave the pure optimizer step.
template <typename T>
T lobster_update(T theta, T grad, T optimizer_displacement, T lambda) {
    const T gate = std::max(T(0), T(1) - std::abs(grad));
    return theta - optimizer_displacement - lambda * theta * gate;
}

template <typename T>
struct OptimizerState {
    OptimizerConfig cfg;
    std::int64_t step_count = 0;
    std::vector<std::vector<T>> m;  // Adam first moments, parallel to named_params order
    std::vector<std::vector<T>> v;  // Adam second moments

    void reset(CapsNetModel<T>& model) {
        step_count = 0;
        m.clear();
        v.clear();
        if (cfg.kind == OptKind::Adam) {
            for (auto& p : model.named_params()) {
                m.emplace_back(p.tensor->size(), T(0));
                v.emplace_back(p.tensor->size(), T(0));
            }
        }
    }
};

// Applies one update over every trainable tensor. Frozen entries receive no
// update and keep their optimizer state untouched; the LOBSTER shrink term is
// applied only to prunable tensors. lr_scale carries the per-epoch decay.
template <typename T>
void optimizer_step(CapsNetModel<T>& model, OptimizerState<T>& state, const LobsterConfig& lobster,
                    double lr_scale = 1.0) {
    auto params = model.named_params();
    const bool adam = state.cfg.kind == OptKind::Adam;
    if (adam && state.m.size() != params.size()) state.reset(model);
    ++state.step_count;
    const T lr = static_cast<T>(state.cfg.lr * lr_scale);
    const T b1 = static_cast<T>(state.cfg.beta1);
    const T b2 = static_cast<T>(state.cfg.beta2);
    const T eps = static_cast<T>(state.cfg.eps);
    const T corr1 = T(1) - static_cast<T>(std::pow(state.cfg.beta1, state.step_count));
    const T corr2 = T(1) - static_cast<T>(std::pow(state.cfg.beta2, state.step_count));
    const T lambda = static_cast<T>(lobster.lambda);

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<T>& t = *params[pi].tensor;
        const std::vector<std::uint8_t>* frozen = params[pi].frozen;
        const bool shrink = lobster.enabled && lobster.lambda != 0.0 && frozen != nullptr;
        const auto& g = t.grad();
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (frozen != nullptr && (*frozen)[i]) continue;
            T disp;
            if (adam) {
                auto& m = state.m[pi];
                auto& v = state.v[pi];
                m[i] = b1 * m[i] + (T(1) - b1) * g[i];
                v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
                const T m_hat = m[i] / corr1;
                const T v_hat = v[i] / corr2;
                disp = lr * m_hat / (std::sqrt(v_hat) + eps);
            } else {
                disp = lr * g[i];
            }
            if (shrink) {
                t[i] = lobster_update(t[i], g[i], disp, lambda);
            } else {
                t[i] -= disp;
            }
        }
    }
}

// Zeroes and permanently freezes prunable entries with |theta| < threshold.
// Returns the number of entries newly frozen.
template <typename T>
std::size_t freeze_below(CapsNetModel<T>& model, double threshold) {
    if (threshold < 0.0) throw ConfigError("freeze_below: threshold must be >= 0");
    std::size_t newly = 0;
    for (auto& p : model.named_params()) {
        if (p.frozen == nullptr) continue;
        Tensor<T>& t = *p.tensor;
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (!(*p.frozen)[i] && std::abs(static_cast<double>(t[i])) < threshold) {
                t[i] = T(0);
                (*p.frozen)[i] = 1;
                ++newly;
            }
        }
    }
    return newly;
}

}  // namespace caps
