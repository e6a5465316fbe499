#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "caps/parallel.hpp"
#include "caps/tape.hpp"
#include "caps/tensor.hpp"

// Differentiable op set. Every op computes its output eagerly and, when the
// tape is enabled and the result needs gradients, records a closure that
// accumulates into the inputs' grad buffers. Accumulation is row-major and
// each output location has a single writer, so results do not depend on the
// worker count.
namespace caps::ops {

// Guard added inside every norm's square root; removes the zero-vector
// singularity of squash, limit at 0 is 0.
inline constexpr double kNormEps = 1e-12;

template <typename T>
bool wants_grad(const Tensor<T>& t) {
    return t.defined() && t.requires_grad();
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

// ---------------------------------------------------------------------------
// Element-wise ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> out(a.shape(), wants_grad(a) || wants_grad(b));
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out(a.shape(), wants_grad(a) || wants_grad(b));
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
            }
        });
    }
    return out;
}

// k * a + c
template <typename T>
Tensor<T> affine(Tape<T>& tape, const Tensor<T>& a, T k, T c) {
    Tensor<T> out(a.shape(), wants_grad(a));
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = k * a[i] + c;
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [a, out, k]() mutable {
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += k * g[i];
        });
    }
    return out;
}

// a ⊙ w with w treated as a constant (no gradient flows into w).
template <typename T>
Tensor<T> mul_const(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& w) {
    check_same_shape(a, w, "mul_const");
    Tensor<T> out(a.shape(), wants_grad(a));
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * w[i];
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [a, w, out]() mutable {
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * w[i];
        });
    }
    return out;
}

// a - c with c treated as a constant.
template <typename T>
Tensor<T> sub_const(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& c) {
    check_same_shape(a, c, "sub_const");
    Tensor<T> out(a.shape(), wants_grad(a));
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - c[i];
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [a, out]() mutable {
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return out;
}

// Subgradient 0 at the kink.
template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& a) {
    Tensor<T> out(a.shape(), wants_grad(a));
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [a, out]() mutable {
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (a[i] > T(0)) ga[i] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& a) {
    Tensor<T> out(a.shape(), wants_grad(a));
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-a[i]));
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [a, out]() mutable {
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * out[i] * (T(1) - out[i]);
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum_all(Tape<T>& tape, const Tensor<T>& a) {
    T acc = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
    Tensor<T> out({}, std::vector<T>{acc}, wants_grad(a));
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [a, out]() mutable {
            const T g = out.grad()[0];
            auto& ga = a.grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
    return a.detached();
}

// ---------------------------------------------------------------------------
// Vector ops over the last axis
// ---------------------------------------------------------------------------

// Guarded L2 norm of each last-axis vector: sqrt(sum(x^2) + eps).
template <typename T>
Tensor<T> norm_lastdim(Tape<T>& tape, const Tensor<T>& a) {
    if (a.rank() < 1) throw ShapeError("norm_lastdim: rank must be >= 1");
    const std::size_t d = a.dim(a.rank() - 1);
    const std::size_t rows = a.size() / d;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    Tensor<T> out(out_shape, wants_grad(a));
    for (std::size_t r = 0; r < rows; ++r) {
        T q = T(kNormEps);
        for (std::size_t k = 0; k < d; ++k) {
            const T x = a[r * d + k];
            q += x * x;
        }
        out[r] = std::sqrt(q);
    }
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [a, out, d, rows]() mutable {
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T coeff = g[r] / out[r];
                for (std::size_t k = 0; k < d; ++k) ga[r * d + k] += coeff * a[r * d + k];
            }
        });
    }
    return out;
}

// v -> (|v|^2 / (1 + |v|^2)) * v / |v| applied to each last-axis vector.
// Output norms lie in [0, 1); direction is preserved.
template <typename T>
Tensor<T> squash(Tape<T>& tape, const Tensor<T>& s) {
    if (s.rank() < 1) throw ShapeError("squash: rank must be >= 1");
    const std::size_t d = s.dim(s.rank() - 1);
    const std::size_t rows = s.size() / d;
    Tensor<T> out(s.shape(), wants_grad(s));
    std::vector<T> qs(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T q = T(kNormEps);
        for (std::size_t k = 0; k < d; ++k) {
            const T x = s[r * d + k];
            q += x * x;
        }
        qs[r] = q;
        const T h = std::sqrt(q) / (T(1) + q);
        for (std::size_t k = 0; k < d; ++k) out[r * d + k] = s[r * d + k] * h;
    }
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [s, out, qs = std::move(qs), d, rows]() mutable {
            const auto& g = out.grad();
            auto& gs = s.grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T q = qs[r];
                const T n = std::sqrt(q);
                const T h = n / (T(1) + q);
                T dot = T(0);
                for (std::size_t k = 0; k < d; ++k) dot += g[r * d + k] * s[r * d + k];
                const T coeff = dot * (T(1) - q) / (n * (T(1) + q) * (T(1) + q));
                for (std::size_t k = 0; k < d; ++k) {
                    gs[r * d + k] += g[r * d + k] * h + s[r * d + k] * coeff;
                }
            }
        });
    }
    return out;
}

// Max-subtracted softmax over the last axis; each row sums to 1.
template <typename T>
Tensor<T> softmax_lastdim(Tape<T>& tape, const Tensor<T>& logits) {
    if (logits.rank() < 1) throw ShapeError("softmax_lastdim: rank must be >= 1");
    const std::size_t d = logits.dim(logits.rank() - 1);
    const std::size_t rows = logits.size() / d;
    Tensor<T> out(logits.shape(), wants_grad(logits));
    for (std::size_t r = 0; r < rows; ++r) {
        T m = logits[r * d];
        for (std::size_t k = 1; k < d; ++k) m = std::max(m, logits[r * d + k]);
        T sum = T(0);
        for (std::size_t k = 0; k < d; ++k) {
            const T e = std::exp(logits[r * d + k] - m);
            out[r * d + k] = e;
            sum += e;
        }
        for (std::size_t k = 0; k < d; ++k) out[r * d + k] /= sum;
    }
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [logits, out, d, rows]() mutable {
            const auto& g = out.grad();
            auto& gl = logits.grad();
            for (std::size_t r = 0; r < rows; ++r) {
                T dot = T(0);
                for (std::size_t k = 0; k < d; ++k) dot += g[r * d + k] * out[r * d + k];
                for (std::size_t k = 0; k < d; ++k) {
                    gl[r * d + k] += out[r * d + k] * (g[r * d + k] - dot);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution and fully connected layers
// ---------------------------------------------------------------------------

// Valid (no padding) 2-d convolution. input [B,C,H,W] or [C,H,W], kernels
// [F,C,k,k], optional bias [F]. Output spatial dims are floor((H-k)/stride)+1.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernels,
                 const Tensor<T>& bias, std::size_t stride) {
    const bool batched = input.rank() == 4;
    if (!batched && input.rank() != 3) {
        throw ShapeError("conv2d: input must be [C,H,W] or [B,C,H,W], got " + shape_str(input.shape()));
    }
    if (kernels.rank() != 4) {
        throw ShapeError("conv2d: kernels must be [F,C,k,k], got " + shape_str(kernels.shape()));
    }
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    const std::size_t b_n = batched ? input.dim(0) : 1;
    const std::size_t c_in = input.dim(batched ? 1 : 0);
    const std::size_t h = input.dim(batched ? 2 : 1);
    const std::size_t w = input.dim(batched ? 3 : 2);
    const std::size_t f_n = kernels.dim(0);
    const std::size_t kh = kernels.dim(2);
    const std::size_t kw = kernels.dim(3);
    if (kernels.dim(1) != c_in) {
        throw ShapeError("conv2d: kernel channels " + std::to_string(kernels.dim(1)) +
                         " do not match input channels " + std::to_string(c_in));
    }
    if (kh > h || kw > w) {
        throw ConfigError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                          " exceeds input " + std::to_string(h) + "x" + std::to_string(w));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != f_n)) {
        throw ShapeError("conv2d: bias must be [F], got " + shape_str(bias.shape()));
    }
    const std::size_t oh = (h - kh) / stride + 1;
    const std::size_t ow = (w - kw) / stride + 1;

    Shape out_shape = batched ? Shape{b_n, f_n, oh, ow} : Shape{f_n, oh, ow};
    Tensor<T> out(out_shape,
                  wants_grad(input) || wants_grad(kernels) || wants_grad(bias));

    const T* in_p = input.data();
    const T* k_p = kernels.data();
    const T* b_p = bias.defined() ? bias.data() : nullptr;
    T* out_p = out.data();
    const std::size_t in_chw = c_in * h * w;
    const std::size_t out_fhw = f_n * oh * ow;

    parallel_for(b_n * f_n, [&](std::size_t begin, std::size_t end) {
        for (std::size_t bf = begin; bf < end; ++bf) {
            const std::size_t b = bf / f_n;
            const std::size_t f = bf % f_n;
            const T* in_b = in_p + b * in_chw;
            const T* k_f = k_p + f * c_in * kh * kw;
            T* out_bf = out_p + b * out_fhw + f * oh * ow;
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    T acc = b_p ? b_p[f] : T(0);
                    for (std::size_t c = 0; c < c_in; ++c) {
                        const T* in_c = in_b + c * h * w + oy * stride * w + ox * stride;
                        const T* k_c = k_f + c * kh * kw;
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                            const T* in_row = in_c + ky * w;
                            const T* k_row = k_c + ky * kw;
                            for (std::size_t kx = 0; kx < kw; ++kx) acc += in_row[kx] * k_row[kx];
                        }
                    }
                    out_bf[oy * ow + ox] = acc;
                }
            }
        }
    });

    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [input, kernels, bias, out, stride, batched, b_n, c_in, h, w, f_n,
                               kh, kw, oh, ow]() mutable {
            const T* g_p = out.grad().data();
            const T* in_p = input.data();
            const T* k_p = kernels.data();
            const std::size_t in_chw = c_in * h * w;
            const std::size_t out_fhw = f_n * oh * ow;
            if (input.requires_grad()) {
                T* gi_p = input.grad().data();
                parallel_for(b_n, [&](std::size_t begin, std::size_t end) {
                    for (std::size_t b = begin; b < end; ++b) {
                        T* gi_b = gi_p + b * in_chw;
                        const T* g_b = g_p + b * out_fhw;
                        for (std::size_t f = 0; f < f_n; ++f) {
                            const T* k_f = k_p + f * c_in * kh * kw;
                            for (std::size_t oy = 0; oy < oh; ++oy) {
                                for (std::size_t ox = 0; ox < ow; ++ox) {
                                    const T g = g_b[f * oh * ow + oy * ow + ox];
                                    for (std::size_t c = 0; c < c_in; ++c) {
                                        T* gi_c = gi_b + c * h * w + oy * stride * w + ox * stride;
                                        const T* k_c = k_f + c * kh * kw;
                                        for (std::size_t ky = 0; ky < kh; ++ky) {
                                            T* gi_row = gi_c + ky * w;
                                            const T* k_row = k_c + ky * kw;
                                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                                gi_row[kx] += g * k_row[kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            if (kernels.requires_grad() || (bias.defined() && bias.requires_grad())) {
                T* gk_p = kernels.requires_grad() ? kernels.grad().data() : nullptr;
                T* gb_p = (bias.defined() && bias.requires_grad()) ? bias.grad().data() : nullptr;
                // Each output channel f owns its kernel/bias slice, so chunks
                // are disjoint and accumulation stays in batch order.
                parallel_for(f_n, [&](std::size_t begin, std::size_t end) {
                    for (std::size_t f = begin; f < end; ++f) {
                        T* gk_f = gk_p ? gk_p + f * c_in * kh * kw : nullptr;
                        for (std::size_t b = 0; b < b_n; ++b) {
                            const T* in_b = in_p + b * in_chw;
                            const T* g_bf = g_p + b * out_fhw + f * oh * ow;
                            for (std::size_t oy = 0; oy < oh; ++oy) {
                                for (std::size_t ox = 0; ox < ow; ++ox) {
                                    const T g = g_bf[oy * ow + ox];
                                    if (gb_p) gb_p[f] += g;
                                    if (gk_f) {
                                        for (std::size_t c = 0; c < c_in; ++c) {
                                            const T* in_c =
                                                in_b + c * h * w + oy * stride * w + ox * stride;
                                            T* gk_c = gk_f + c * kh * kw;
                                            for (std::size_t ky = 0; ky < kh; ++ky) {
                                                const T* in_row = in_c + ky * w;
                                                T* gk_row = gk_c + ky * kw;
                                                for (std::size_t kx = 0; kx < kw; ++kx) {
                                                    gk_row[kx] += g * in_row[kx];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernels,
                 std::size_t stride) {
    return conv2d(tape, input, kernels, Tensor<T>{}, stride);
}

// y = x * w + b with x [B,n_in], w [n_in,n_out], b [n_out].
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.rank() != 2 || w.rank() != 2) throw ShapeError("linear: x and w must be rank 2");
    const std::size_t bs = x.dim(0);
    const std::size_t n_in = x.dim(1);
    const std::size_t n_out = w.dim(1);
    if (w.dim(0) != n_in) {
        throw ShapeError("linear: w rows " + std::to_string(w.dim(0)) + " != input features " +
                         std::to_string(n_in));
    }
    if (b.rank() != 1 || b.dim(0) != n_out) throw ShapeError("linear: bias must be [n_out]");
    Tensor<T> out({bs, n_out}, wants_grad(x) || wants_grad(w) || wants_grad(b));
    parallel_for(bs, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            for (std::size_t o = 0; o < n_out; ++o) {
                T acc = b[o];
                for (std::size_t k = 0; k < n_in; ++k) acc += x[i * n_in + k] * w[k * n_out + o];
                out[i * n_out + o] = acc;
            }
        }
    });
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [x, w, b, out, bs, n_in, n_out]() mutable {
            const auto& g = out.grad();
            if (x.requires_grad()) {
                T* gx = x.grad().data();
                parallel_for(bs, [&](std::size_t begin, std::size_t end) {
                    for (std::size_t i = begin; i < end; ++i) {
                        for (std::size_t k = 0; k < n_in; ++k) {
                            T acc = T(0);
                            for (std::size_t o = 0; o < n_out; ++o) {
                                acc += g[i * n_out + o] * w[k * n_out + o];
                            }
                            gx[i * n_in + k] += acc;
                        }
                    }
                });
            }
            if (w.requires_grad()) {
                T* gw = w.grad().data();
                parallel_for(n_in, [&](std::size_t begin, std::size_t end) {
                    for (std::size_t k = begin; k < end; ++k) {
                        for (std::size_t i = 0; i < bs; ++i) {
                            const T xv = x[i * n_in + k];
                            for (std::size_t o = 0; o < n_out; ++o) {
                                gw[k * n_out + o] += xv * g[i * n_out + o];
                            }
                        }
                    }
                });
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < bs; ++i) {
                    for (std::size_t o = 0; o < n_out; ++o) gb[o] += g[i * n_out + o];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Capsule-specific contractions
// ---------------------------------------------------------------------------

// Votes from poses [B,I,D1] and transforms w [I,J,D1,D2] -> [B,I,J,D2].
// Each (i,j) block holds D1*D2 weights; its memory is applied row-acting:
// output coordinate d2 is the dot product of the contiguous D1-length row
// block[d2*D1 .. d2*D1+D1) with the pose.
template <typename T>
Tensor<T> compute_votes(Tape<T>& tape, const Tensor<T>& poses, const Tensor<T>& w) {
    if (poses.rank() != 3) throw ShapeError("compute_votes: poses must be [B,I,D1]");
    if (w.rank() != 4) throw ShapeError("compute_votes: w must be [I,J,D1,D2]");
    const std::size_t bs = poses.dim(0);
    const std::size_t n_i = poses.dim(1);
    const std::size_t d1 = poses.dim(2);
    if (w.dim(0) != n_i || w.dim(2) != d1) {
        throw ShapeError("compute_votes: transform shape " + shape_str(w.shape()) +
                         " does not match poses " + shape_str(poses.shape()));
    }
    const std::size_t n_j = w.dim(1);
    const std::size_t d2 = w.dim(3);
    const std::size_t block = d1 * d2;
    Tensor<T> out({bs, n_i, n_j, d2}, wants_grad(poses) || wants_grad(w));
    parallel_for(bs, [&](std::size_t begin, std::size_t end) {
        for (std::size_t b = begin; b < end; ++b) {
            for (std::size_t i = 0; i < n_i; ++i) {
                const T* u = poses.data() + (b * n_i + i) * d1;
                for (std::size_t j = 0; j < n_j; ++j) {
                    const T* blk = w.data() + (i * n_j + j) * block;
                    T* o = out.data() + ((b * n_i + i) * n_j + j) * d2;
                    for (std::size_t k = 0; k < d2; ++k) {
                        T acc = T(0);
                        for (std::size_t m = 0; m < d1; ++m) acc += blk[k * d1 + m] * u[m];
                        o[k] = acc;
                    }
                }
            }
        }
    });
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [poses, w, out, bs, n_i, n_j, d1, d2, block]() mutable {
            const T* g = out.grad().data();
            if (poses.requires_grad()) {
                T* gu_p = poses.grad().data();
                parallel_for(bs, [&](std::size_t begin, std::size_t end) {
                    for (std::size_t b = begin; b < end; ++b) {
                        for (std::size_t i = 0; i < n_i; ++i) {
                            T* gu = gu_p + (b * n_i + i) * d1;
                            for (std::size_t j = 0; j < n_j; ++j) {
                                const T* blk = w.data() + (i * n_j + j) * block;
                                const T* go = g + ((b * n_i + i) * n_j + j) * d2;
                                for (std::size_t k = 0; k < d2; ++k) {
                                    for (std::size_t m = 0; m < d1; ++m) {
                                        gu[m] += go[k] * blk[k * d1 + m];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            if (w.requires_grad()) {
                T* gw_p = w.grad().data();
                parallel_for(n_i, [&](std::size_t begin, std::size_t end) {
                    for (std::size_t i = begin; i < end; ++i) {
                        for (std::size_t b = 0; b < bs; ++b) {
                            const T* u = poses.data() + (b * n_i + i) * d1;
                            for (std::size_t j = 0; j < n_j; ++j) {
                                T* gblk = gw_p + (i * n_j + j) * block;
                                const T* go = g + ((b * n_i + i) * n_j + j) * d2;
                                for (std::size_t k = 0; k < d2; ++k) {
                                    for (std::size_t m = 0; m < d1; ++m) {
                                        gblk[k * d1 + m] += go[k] * u[m];
                                    }
                                }
                            }
                        }
                    }
                });
            }
        });
    }
    return out;
}

// s[b,j,:] = sum_i c[b,i,j] * votes[b,i,j,:]
template <typename T>
Tensor<T> coupling_weighted_sum(Tape<T>& tape, const Tensor<T>& c, const Tensor<T>& votes) {
    if (c.rank() != 3 || votes.rank() != 4) {
        throw ShapeError("coupling_weighted_sum: want c [B,I,J], votes [B,I,J,D]");
    }
    const std::size_t bs = votes.dim(0);
    const std::size_t n_i = votes.dim(1);
    const std::size_t n_j = votes.dim(2);
    const std::size_t d = votes.dim(3);
    if (c.dim(0) != bs || c.dim(1) != n_i || c.dim(2) != n_j) {
        throw ShapeError("coupling_weighted_sum: c " + shape_str(c.shape()) +
                         " does not match votes " + shape_str(votes.shape()));
    }
    Tensor<T> out({bs, n_j, d}, wants_grad(c) || wants_grad(votes));
    for (std::size_t b = 0; b < bs; ++b) {
        for (std::size_t i = 0; i < n_i; ++i) {
            for (std::size_t j = 0; j < n_j; ++j) {
                const T cv = c[(b * n_i + i) * n_j + j];
                const T* v = votes.data() + ((b * n_i + i) * n_j + j) * d;
                T* o = out.data() + (b * n_j + j) * d;
                for (std::size_t k = 0; k < d; ++k) o[k] += cv * v[k];
            }
        }
    }
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [c, votes, out, bs, n_i, n_j, d]() mutable {
            const T* g = out.grad().data();
            for (std::size_t b = 0; b < bs; ++b) {
                for (std::size_t i = 0; i < n_i; ++i) {
                    for (std::size_t j = 0; j < n_j; ++j) {
                        const std::size_t cij = (b * n_i + i) * n_j + j;
                        const T* v = votes.data() + cij * d;
                        const T* go = g + (b * n_j + j) * d;
                        if (c.requires_grad()) {
                            T acc = T(0);
                            for (std::size_t k = 0; k < d; ++k) acc += go[k] * v[k];
                            c.grad()[cij] += acc;
                        }
                        if (votes.requires_grad()) {
                            const T cv = c[cij];
                            T* gv = votes.grad().data() + cij * d;
                            for (std::size_t k = 0; k < d; ++k) gv[k] += go[k] * cv;
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Agreement a[b,i,j] = u[b,j,:] . votes[b,i,j,:]
template <typename T>
Tensor<T> routing_agreement(Tape<T>& tape, const Tensor<T>& u, const Tensor<T>& votes) {
    if (u.rank() != 3 || votes.rank() != 4) {
        throw ShapeError("routing_agreement: want u [B,J,D], votes [B,I,J,D]");
    }
    const std::size_t bs = votes.dim(0);
    const std::size_t n_i = votes.dim(1);
    const std::size_t n_j = votes.dim(2);
    const std::size_t d = votes.dim(3);
    if (u.dim(0) != bs || u.dim(1) != n_j || u.dim(2) != d) {
        throw ShapeError("routing_agreement: u " + shape_str(u.shape()) + " does not match votes " +
                         shape_str(votes.shape()));
    }
    Tensor<T> out({bs, n_i, n_j}, wants_grad(u) || wants_grad(votes));
    for (std::size_t b = 0; b < bs; ++b) {
        for (std::size_t i = 0; i < n_i; ++i) {
            for (std::size_t j = 0; j < n_j; ++j) {
                const T* uv = u.data() + (b * n_j + j) * d;
                const T* v = votes.data() + ((b * n_i + i) * n_j + j) * d;
                T acc = T(0);
                for (std::size_t k = 0; k < d; ++k) acc += uv[k] * v[k];
                out[(b * n_i + i) * n_j + j] = acc;
            }
        }
    }
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [u, votes, out, bs, n_i, n_j, d]() mutable {
            const T* g = out.grad().data();
            for (std::size_t b = 0; b < bs; ++b) {
                for (std::size_t i = 0; i < n_i; ++i) {
                    for (std::size_t j = 0; j < n_j; ++j) {
                        const std::size_t aij = (b * n_i + i) * n_j + j;
                        const T gv = g[aij];
                        const T* uv = u.data() + (b * n_j + j) * d;
                        const T* v = votes.data() + aij * d;
                        if (u.requires_grad()) {
                            T* gu = u.grad().data() + (b * n_j + j) * d;
                            for (std::size_t k = 0; k < d; ++k) gu[k] += gv * v[k];
                        }
                        if (votes.requires_grad()) {
                            T* gvv = votes.grad().data() + aij * d;
                            for (std::size_t k = 0; k < d; ++k) gvv[k] += gv * uv[k];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// [B, O*D1, M, N] -> poses [B, M*N*O, D1], capsule i = (m*N + n)*O + o reading
// channel o*D1 + d. This flattening order is fixed so downstream coupling
// strings are stable across runs.
template <typename T>
Tensor<T> primary_reshape(Tape<T>& tape, const Tensor<T>& x, std::size_t o_types, std::size_t d1) {
    if (x.rank() != 4) throw ShapeError("primary_reshape: want [B,O*D1,M,N]");
    const std::size_t bs = x.dim(0);
    const std::size_t ch = x.dim(1);
    const std::size_t m_n = x.dim(2);
    const std::size_t n_n = x.dim(3);
    if (ch != o_types * d1) {
        throw ShapeError("primary_reshape: channels " + std::to_string(ch) + " != O*D1 = " +
                         std::to_string(o_types * d1));
    }
    const std::size_t n_i = m_n * n_n * o_types;
    Tensor<T> out({bs, n_i, d1}, wants_grad(x));
    for (std::size_t b = 0; b < bs; ++b) {
        for (std::size_t mm = 0; mm < m_n; ++mm) {
            for (std::size_t nn = 0; nn < n_n; ++nn) {
                for (std::size_t o = 0; o < o_types; ++o) {
                    const std::size_t i = (mm * n_n + nn) * o_types + o;
                    for (std::size_t d = 0; d < d1; ++d) {
                        out[(b * n_i + i) * d1 + d] =
                            x[((b * ch + o * d1 + d) * m_n + mm) * n_n + nn];
                    }
                }
            }
        }
    }
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [x, out, bs, ch, m_n, n_n, o_types, d1, n_i]() mutable {
            const auto& g = out.grad();
            auto& gx = x.grad();
            for (std::size_t b = 0; b < bs; ++b) {
                for (std::size_t mm = 0; mm < m_n; ++mm) {
                    for (std::size_t nn = 0; nn < n_n; ++nn) {
                        for (std::size_t o = 0; o < o_types; ++o) {
                            const std::size_t i = (mm * n_n + nn) * o_types + o;
                            for (std::size_t d = 0; d < d1; ++d) {
                                gx[((b * ch + o * d1 + d) * m_n + mm) * n_n + nn] +=
                                    g[(b * n_i + i) * d1 + d];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Zeroes every class pose except the selected one and flattens to [B, J*D].
template <typename T>
Tensor<T> mask_select_class(Tape<T>& tape, const Tensor<T>& poses, const std::vector<int>& labels) {
    if (poses.rank() != 3) throw ShapeError("mask_select_class: want poses [B,J,D]");
    const std::size_t bs = poses.dim(0);
    const std::size_t n_j = poses.dim(1);
    const std::size_t d = poses.dim(2);
    if (labels.size() != bs) throw ShapeError("mask_select_class: labels size != batch");
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= n_j) {
            throw DataError("mask_select_class: label " + std::to_string(l) + " out of range [0, " +
                            std::to_string(n_j) + ")");
        }
    }
    Tensor<T> out({bs, n_j * d}, wants_grad(poses));
    for (std::size_t b = 0; b < bs; ++b) {
        const std::size_t j = static_cast<std::size_t>(labels[b]);
        for (std::size_t k = 0; k < d; ++k) {
            out[b * n_j * d + j * d + k] = poses[(b * n_j + j) * d + k];
        }
    }
    if (tape.enabled() && out.requires_grad()) {
        tape.record(out.id(), [poses, out, labels, n_j, d, bs]() mutable {
            const auto& g = out.grad();
            auto& gp = poses.grad();
            for (std::size_t b = 0; b < bs; ++b) {
                const std::size_t j = static_cast<std::size_t>(labels[b]);
                for (std::size_t k = 0; k < d; ++k) {
                    gp[(b * n_j + j) * d + k] += g[b * n_j * d + j * d + k];
                }
            }
        });
    }
    return out;
}

}  // namespace caps::ops
