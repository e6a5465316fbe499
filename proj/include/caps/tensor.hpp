#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "caps/error.hpp"

namespace caps {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense N-d array with an optional same-shape gradient buffer. A Tensor is a
// shared handle to its storage: copies alias, clone() deep-copies. Op outputs
// are written once and treated as immutable afterwards; gradients are the
// only mutable part and are accumulated during tape replay.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, bool requires_grad = false)
        : s_(std::make_shared<Storage>()) {
        s_->shape = std::move(shape);
        s_->values.assign(shape_size(s_->shape), T(0));
        set_requires_grad(requires_grad);
    }

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : s_(std::make_shared<Storage>()) {
        if (shape_size(shape) != values.size()) {
            throw ShapeError("Tensor: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        }
        s_->shape = std::move(shape);
        s_->values = std::move(values);
        set_requires_grad(requires_grad);
    }

    static Tensor scalar(T v) { return Tensor({}, std::vector<T>{v}); }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    std::size_t rank() const { return s_->shape.size(); }
    std::size_t size() const { return s_->values.size(); }
    std::size_t dim(std::size_t i) const { return s_->shape[i]; }

    std::vector<T>& vals() { return s_->values; }
    const std::vector<T>& vals() const { return s_->values; }
    T* data() { return s_->values.data(); }
    const T* data() const { return s_->values.data(); }
    T& operator[](std::size_t i) { return s_->values[i]; }
    const T& operator[](std::size_t i) const { return s_->values[i]; }

    T item() const {
        if (size() != 1) throw UsageError("Tensor::item: tensor is not a scalar");
        return s_->values[0];
    }

    bool requires_grad() const { return s_->requires_grad; }

    void set_requires_grad(bool on) {
        s_->requires_grad = on;
        if (on) {
            s_->grad.assign(s_->values.size(), T(0));
        } else {
            s_->grad.clear();
        }
    }

    // The gradient buffer is shared mutable state: backward replay accumulates
    // into it through const handles, hence const-callable.
    std::vector<T>& grad() const {
        if (!s_->requires_grad) throw UsageError("Tensor::grad: tensor does not require grad");
        return s_->grad;
    }

    void zero_grad() const {
        if (s_->requires_grad) s_->grad.assign(s_->values.size(), T(0));
    }

    // Identity of the underlying storage; used by the tape.
    const void* id() const { return s_ ? static_cast<const void*>(s_.get()) : nullptr; }

    Tensor clone() const {
        Tensor out(s_->shape, s_->values, s_->requires_grad);
        return out;
    }

    // Same values, no gradient tracking. Gradients flowing into the detached
    // tensor are dropped.
    Tensor detached() const { return Tensor(s_->shape, s_->values, false); }

private:
    struct Storage {
        Shape shape;
        std::vector<T> values;
        std::vector<T> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Storage> s_;
};

inline std::size_t idx2(std::size_t i, std::size_t j, std::size_t nj) { return i * nj + j; }

inline std::size_t idx3(std::size_t i, std::size_t j, std::size_t k, std::size_t nj, std::size_t nk) {
    return (i * nj + j) * nk + k;
}

inline std::size_t idx4(std::size_t i, std::size_t j, std::size_t k, std::size_t l,
                        std::size_t nj, std::size_t nk, std::size_t nl) {
    return ((i * nj + j) * nk + k) * nl + l;
}

}  // namespace caps
