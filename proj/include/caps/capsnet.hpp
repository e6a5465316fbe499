#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "caps/model.hpp"
#include "caps/ops.hpp"
#include "caps/tape.hpp"
#include "caps/tensor.hpp"

namespace caps {

struct RoutingOptions {
    int iterations = 3;
    // Treat the coupling coefficients as constants in backward; gradients then
    // reach the votes only through the weighted sums.
    bool detach_couplings = false;
};

template <typename T>
struct RoutingResult {
    Tensor<T> class_poses;  // [B, J, D2]
    Tensor<T> couplings;    // [B, I, J], the couplings of the final forward pass
};

template <typename T>
struct ForwardResult {
    Tensor<T> class_poses;    // [B, J, D2]
    Tensor<T> couplings;      // [B, I, J]
    Tensor<T> primary_poses;  // [B, I, D1]
};

// Routing by agreement over a vote tensor [B, I, J, D2]. Logits start at
// zero; each iteration applies softmax over j, forms the weighted vote sums,
// squashes them, and adds the pose/vote agreement back onto the logits. The
// loop body runs exactly r times (the final logit update has no effect on the
// returned poses). Differentiation unrolls through all iterations.
template <typename T>
RoutingResult<T> dynamic_routing(Tape<T>& tape, const Tensor<T>& votes, const RoutingOptions& opt) {
    if (opt.iterations < 1) throw ConfigError("dynamic_routing: iterations must be >= 1");
    if (votes.rank() != 4) throw ShapeError("dynamic_routing: votes must be [B,I,J,D2]");
    const std::size_t bs = votes.dim(0);
    const std::size_t n_i = votes.dim(1);
    const std::size_t n_j = votes.dim(2);

    Tensor<T> logits({bs, n_i, n_j});  // b <- 0
    Tensor<T> couplings, poses;
    for (int it = 0; it < opt.iterations; ++it) {
        couplings = ops::softmax_lastdim(tape, logits);
        const Tensor<T> c_used = opt.detach_couplings ? ops::detach(couplings) : couplings;
        const Tensor<T> s = ops::coupling_weighted_sum(tape, c_used, votes);
        poses = ops::squash(tape, s);
        const Tensor<T> agreement = ops::routing_agreement(tape, poses, votes);
        logits = ops::add(tape, logits, agreement);
    }
    return {poses, couplings};
}

template <typename T>
RoutingResult<T> dynamic_routing(Tape<T>& tape, const Tensor<T>& votes, int iterations) {
    return dynamic_routing(tape, votes, RoutingOptions{iterations, false});
}

// images [B,C,H,W] (or [C,H,W] for one sample) -> squashed primary-capsule
// poses [B, I, D1], grid flattened in row-major (m, n, o) order.
template <typename T>
Tensor<T> primary_caps_forward(Tape<T>& tape, const Tensor<T>& images, const CapsNetModel<T>& m) {
    Tensor<T> in = images;
    if (in.rank() == 3) {
        in = Tensor<T>({1, images.dim(0), images.dim(1), images.dim(2)}, images.vals(),
                       images.requires_grad());
    }
    if (in.rank() != 4) throw ShapeError("primary_caps_forward: want images [B,C,H,W]");
    if (in.dim(1) != m.cfg.in_channels || in.dim(2) != m.cfg.in_h || in.dim(3) != m.cfg.in_w) {
        throw ConfigError("primary_caps_forward: images " + shape_str(in.shape()) +
                          " do not match the model's configured input " +
                          std::to_string(m.cfg.in_channels) + "x" + std::to_string(m.cfg.in_h) +
                          "x" + std::to_string(m.cfg.in_w));
    }
    m.cfg.validate();
    const Tensor<T> a1 = ops::relu(tape, ops::conv2d(tape, in, m.conv1_w, m.conv1_b,
                                                     m.cfg.conv1_stride));
    const Tensor<T> pc = ops::conv2d(tape, a1, m.primary_w, m.primary_b, m.cfg.primary_stride);
    const Tensor<T> poses = ops::primary_reshape(tape, pc, m.cfg.capsule_types, m.cfg.d_primary);
    return ops::squash(tape, poses);
}

template <typename T>
ForwardResult<T> capsnet_forward(Tape<T>& tape, const Tensor<T>& images, const CapsNetModel<T>& m,
                                 const RoutingOptions& opt) {
    const Tensor<T> primary = primary_caps_forward(tape, images, m);
    const Tensor<T> votes = ops::compute_votes(tape, primary, m.w_class);
    RoutingResult<T> routed = dynamic_routing(tape, votes, opt);
    return {routed.class_poses, routed.couplings, primary};
}

// Label = argmax over j of the class pose norm; ties take the lowest index.
template <typename T>
std::vector<int> predict(const Tensor<T>& class_poses) {
    if (class_poses.rank() != 3) throw ShapeError("predict: want class poses [B,J,D]");
    const std::size_t bs = class_poses.dim(0);
    const std::size_t n_j = class_poses.dim(1);
    const std::size_t d = class_poses.dim(2);
    std::vector<int> labels(bs, 0);
    for (std::size_t b = 0; b < bs; ++b) {
        double best = -1.0;
        int best_j = 0;
        for (std::size_t j = 0; j < n_j; ++j) {
            double q = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double x = static_cast<double>(class_poses[(b * n_j + j) * d + k]);
                q += x * x;
            }
            if (q > best) {
                best = q;
                best_j = static_cast<int>(j);
            }
        }
        labels[b] = best_j;
    }
    return labels;
}

// Masks every class pose except the labelled one, then runs the fully
// connected reconstruction stack (ReLU, ReLU, sigmoid). Output is [B, H*W]
// with entries in (0, 1).
template <typename T>
Tensor<T> decoder_forward(Tape<T>& tape, const Tensor<T>& class_poses,
                          const std::vector<int>& labels, const CapsNetModel<T>& m) {
    if (!m.cfg.decoder) throw UsageError("decoder_forward: decoder is disabled in this model");
    const Tensor<T> masked = ops::mask_select_class(tape, class_poses, labels);
    const Tensor<T> h1 = ops::relu(tape, ops::linear(tape, masked, m.dec_w1, m.dec_b1));
    const Tensor<T> h2 = ops::relu(tape, ops::linear(tape, h1, m.dec_w2, m.dec_b2));
    return ops::sigmoid(tape, ops::linear(tape, h2, m.dec_w3, m.dec_b3));
}

}  // namespace caps
