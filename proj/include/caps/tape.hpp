#pragma once

#include <functional>
#include <unordered_set>
#include <utility>
#include <vector>

#include "caps/error.hpp"
#include "caps/tensor.hpp"

namespace caps {

// Reverse-mode tape. Ops append one entry per executed operation in forward
// order; backward() seeds d(loss)/d(loss) = 1 and replays the entries in
// reverse, with each entry accumulating into its inputs' grad buffers.
// Forward order is a topological order of the graph, so every grad-requiring
// leaf receives its full gradient exactly once.
template <typename T>
class Tape {
public:
    Tape() = default;
    explicit Tape(bool enabled) : enabled_(enabled) {}

    bool enabled() const { return enabled_; }
    void set_enabled(bool on) { enabled_ = on; }

    std::size_t size() const { return entries_.size(); }

    void record(const void* out_id, std::function<void()> backward_fn) {
        if (!enabled_) return;
        outputs_.insert(out_id);
        entries_.emplace_back(out_id, std::move(backward_fn));
    }

    bool contains(const void* id) const { return outputs_.count(id) != 0; }

    void clear() {
        entries_.clear();
        outputs_.clear();
    }

    void backward(Tensor<T>& loss) {
        if (!loss.defined() || loss.size() != 1) {
            throw UsageError("Tape::backward: loss must be a defined scalar tensor");
        }
        if (!contains(loss.id())) {
            throw UsageError("Tape::backward: loss was not produced by an operation on this tape");
        }
        loss.grad()[0] = T(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            it->second();
        }
    }

private:
    bool enabled_ = true;
    std::vector<std::pair<const void*, std::function<void()>>> entries_;
    std::unordered_set<const void*> outputs_;
};

}  // namespace caps
