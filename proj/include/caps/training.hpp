#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "caps/capsnet.hpp"
#include "caps/data.hpp"
#include "caps/losses.hpp"
#include "caps/model.hpp"
#include "caps/optimizer.hpp"
#include "caps/parallel.hpp"
#include "caps/rng.hpp"

namespace caps {

enum class RoutingMode { Fixed, Annealing };

struct TrainConfig {
    OptimizerConfig opt;
    LossConfig loss;
    LobsterConfig lobster;
    std::size_t batch_size = 128;
    int max_epochs = 50;
    int patience = 10;
    std::uint64_t seed = 1;
    RoutingMode mode = RoutingMode::Fixed;
    int r = 3;       // fixed-routing iterations
    int r0 = 1;      // annealing start
    int r_max = 50;  // annealing ceiling
    int r_step = 1;  // annealing increment
    bool detach_couplings = false;
    double lr_decay = 1.0;  // per-epoch multiplicative factor (0.99 enables the decay option)
    bool reproducible = false;

    void validate() const {
        loss.validate();
        lobster.validate();
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
        if (patience < 1) throw ConfigError("train: patience must be >= 1");
        if (r < 1) throw ConfigError("train: r must be >= 1");
        if (r0 < 1) throw ConfigError("train: r0 must be >= 1");
        if (r_step < 1) throw ConfigError("train: annealing step must be >= 1");
        if (r_max < r0) throw ConfigError("train: r_max must be >= r0");
        if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("train: lr_decay must lie in (0, 1]");
    }
};

// Complete training state at one epoch; restoring it resumes the run exactly.
template <typename T>
struct TrainingSnapshot {
    CapsNetModel<T> model;
    OptimizerState<T> opt;
    std::string rng_state;
    int epoch = -1;
    int r = 1;
    double val_loss = std::numeric_limits<double>::infinity();

    bool valid() const { return epoch >= 0; }
};

struct EpochStats {
    int epoch = 0;
    int r = 1;
    double train_loss = 0, val_loss = 0, val_acc = 0, sparsity = 0, wall_seconds = 0;
};

struct AnnealEvent {
    int k = 0;       // annealing step index after the increment
    int epoch = 0;   // epoch at which the step fired
    int r_prev = 0;
    int r_new = 0;
    double best_prev = 0;  // best validation loss recorded at r_prev
};

template <typename T>
struct TrainHooks {
    // Test hook: replaces the measured validation loss for stop-rule checks.
    std::function<double(int epoch, double measured)> val_loss_override;
    std::function<void(const AnnealEvent&, const CapsNetModel<T>&)> on_anneal;
    std::function<void(int epoch, const CapsNetModel<T>&)> on_epoch_end;
};

template <typename T>
struct TrainResult {
    TrainingSnapshot<T> best;
    int r_star = 1;
    std::vector<EpochStats> history;
    std::vector<AnnealEvent> anneals;
};

struct EvalReport {
    double accuracy = 0;
    double mean_loss = 0;
    std::vector<double> per_class_accuracy;
    std::vector<std::size_t> per_class_count;
};

template <typename T>
Tensor<T> batch_tensor(const Dataset& ds, const std::vector<std::size_t>& idx, std::size_t begin,
                       std::size_t end) {
    const std::size_t bs = end - begin;
    Tensor<T> out({bs, ds.c, ds.h, ds.w});
    for (std::size_t i = 0; i < bs; ++i) {
        const float* src = ds.image(idx[begin + i]);
        T* dst = out.data() + i * ds.sample_size();
        for (std::size_t k = 0; k < ds.sample_size(); ++k) dst[k] = static_cast<T>(src[k]);
    }
    return out;
}

// Deterministic full pass: no weight mutation, batches in dataset order.
template <typename T>
EvalReport evaluate(const CapsNetModel<T>& model, const Dataset& ds, int r,
                    const LossConfig& loss_cfg, std::size_t batch_size = 256,
                    bool detach_couplings = false) {
    if (ds.n == 0) throw DataError("evaluate: dataset is empty");
    EvalReport rep;
    rep.per_class_accuracy.assign(model.cfg.num_classes, 0.0);
    rep.per_class_count.assign(model.cfg.num_classes, 0);
    std::vector<std::size_t> correct(model.cfg.num_classes, 0);
    std::vector<std::size_t> idx(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i) idx[i] = i;
    double loss_sum = 0;
    std::size_t hits = 0;
    const RoutingOptions opt{r, detach_couplings};
    for (std::size_t begin = 0; begin < ds.n; begin += batch_size) {
        const std::size_t end = std::min(ds.n, begin + batch_size);
        Tape<T> tape(false);
        const Tensor<T> images = batch_tensor<T>(ds, idx, begin, end);
        const std::vector<int> labels(ds.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                                      ds.labels.begin() + static_cast<std::ptrdiff_t>(end));
        const ForwardResult<T> fwd = capsnet_forward(tape, images, model, opt);
        Tensor<T> margin = margin_loss(tape, fwd.class_poses, labels, loss_cfg);
        Tensor<T> recon;
        if (model.cfg.decoder) {
            const Tensor<T> rec = decoder_forward(tape, fwd.class_poses, labels, model);
            recon = reconstruction_loss(tape, rec, images);
        }
        const Tensor<T> loss = total_loss(tape, margin, recon, loss_cfg.beta);
        loss_sum += static_cast<double>(loss.item()) * static_cast<double>(end - begin);
        const std::vector<int> pred = predict(fwd.class_poses);
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const int y = labels[i];
            ++rep.per_class_count[static_cast<std::size_t>(y)];
            if (pred[i] == y) {
                ++hits;
                ++correct[static_cast<std::size_t>(y)];
            }
        }
    }
    rep.accuracy = static_cast<double>(hits) / static_cast<double>(ds.n);
    rep.mean_loss = loss_sum / static_cast<double>(ds.n);
    for (std::size_t j = 0; j < correct.size(); ++j) {
        rep.per_class_accuracy[j] = rep.per_class_count[j] == 0
                                        ? 0.0
                                        : static_cast<double>(correct[j]) /
                                              static_cast<double>(rep.per_class_count[j]);
    }
    return rep;
}

namespace detail {

template <typename T>
double train_one_epoch(CapsNetModel<T>& model, OptimizerState<T>& opt_state,
                       const TrainConfig& cfg, const Dataset& train, Rng& rng, int r, int epoch) {
    std::vector<std::size_t> order(train.n);
    for (std::size_t i = 0; i < train.n; ++i) order[i] = i;
    rng.shuffle(order);
    const RoutingOptions ropt{r, cfg.detach_couplings};
    const double lr_scale = std::pow(cfg.lr_decay, epoch);
    double loss_sum = 0;
    for (std::size_t begin = 0; begin < train.n; begin += cfg.batch_size) {
        const std::size_t end = std::min(train.n, begin + cfg.batch_size);
        Tape<T> tape;
        const Tensor<T> images = batch_tensor<T>(train, order, begin, end);
        std::vector<int> labels(end - begin);
        for (std::size_t i = begin; i < end; ++i) labels[i - begin] = train.labels[order[i]];
        const ForwardResult<T> fwd = capsnet_forward(tape, images, model, ropt);
        Tensor<T> margin = margin_loss(tape, fwd.class_poses, labels, cfg.loss);
        Tensor<T> recon;
        if (model.cfg.decoder) {
            const Tensor<T> rec = decoder_forward(tape, fwd.class_poses, labels, model);
            recon = reconstruction_loss(tape, rec, images);
        }
        Tensor<T> loss = total_loss(tape, margin, recon, cfg.loss.beta);
        loss_sum += static_cast<double>(loss.item()) * static_cast<double>(end - begin);
        model.zero_grad();
        tape.backward(loss);
        optimizer_step(model, opt_state, cfg.lobster, lr_scale);
    }
    if (cfg.lobster.enabled) freeze_below(model, cfg.lobster.threshold);
    return loss_sum / static_cast<double>(train.n);
}

template <typename T>
TrainingSnapshot<T> snapshot(const CapsNetModel<T>& model, const OptimizerState<T>& opt,
                             const Rng& rng, int epoch, int r, double val_loss) {
    TrainingSnapshot<T> s;
    s.model = model.clone();
    s.opt = opt;
    s.rng_state = rng.serialize();
    s.epoch = epoch;
    s.r = r;
    s.val_loss = val_loss;
    return s;
}

class WorkerGuard {
public:
    explicit WorkerGuard(bool force_sequential) : prev_(max_workers()), active_(force_sequential) {
        if (active_) set_max_workers(1);
    }
    ~WorkerGuard() {
        if (active_) set_max_workers(prev_);
    }

private:
    int prev_;
    bool active_;
};

}  // namespace detail

// Trains with a constant number of routing iterations; stops once the
// validation loss has not improved for `patience` epochs (or at max_epochs)
// and returns the snapshot with the lowest validation loss.
template <typename T>
TrainResult<T> train_fixed_routing(const ModelConfig& model_cfg, const TrainConfig& cfg,
                                   const Dataset& train, const Dataset& val,
                                   const TrainHooks<T>& hooks = {}) {
    cfg.validate();
    model_cfg.validate();
    if (train.n == 0) throw DataError("train_fixed_routing: training split is empty");
    if (val.n == 0) throw DataError("train_fixed_routing: validation split is empty");
    detail::WorkerGuard guard(cfg.reproducible);

    Rng rng(cfg.seed);
    CapsNetModel<T> model = CapsNetModel<T>::init(model_cfg, rng);
    OptimizerState<T> opt;
    opt.cfg = cfg.opt;
    opt.reset(model);

    TrainResult<T> result;
    result.r_star = cfg.r;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double train_loss = detail::train_one_epoch(model, opt, cfg, train, rng, cfg.r, epoch);
        const EvalReport ev = evaluate(model, val, cfg.r, cfg.loss, cfg.batch_size,
                                       cfg.detach_couplings);
        double val_loss = ev.mean_loss;
        if (hooks.val_loss_override) val_loss = hooks.val_loss_override(epoch, val_loss);
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back({epoch, cfg.r, train_loss, val_loss, ev.accuracy,
                                  model_sparsity(model), cfg.reproducible ? 0.0 : wall});
        if (val_loss < result.best.val_loss) {
            result.best = detail::snapshot(model, opt, rng, epoch, cfg.r, val_loss);
        }
        if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, model);
        if (result.best.valid() && epoch - result.best.epoch >= cfg.patience) break;
    }
    if (!result.best.valid()) {
        result.best = detail::snapshot(model, opt, rng, cfg.max_epochs - 1, cfg.r,
                                       std::numeric_limits<double>::quiet_NaN());
    }
    return result;
}

// Routing Annealing: starts at r0 and, whenever the validation loss fails to
// improve for `patience` epochs at the current r, increments r by r_step and
// resumes from the best state recorded at the previous r (weights, optimizer
// moments and RNG stream are all rolled back). Training ends when a step
// would push r beyond r_max (or at max_epochs). Returns the best snapshot
// across all annealing steps and the r at which it was recorded.
template <typename T>
TrainResult<T> train_routing_annealing(const ModelConfig& model_cfg, const TrainConfig& cfg,
                                       const Dataset& train, const Dataset& val,
                                       const TrainHooks<T>& hooks = {}) {
    cfg.validate();
    model_cfg.validate();
    if (train.n == 0) throw DataError("train_routing_annealing: training split is empty");
    if (val.n == 0) throw DataError("train_routing_annealing: validation split is empty");
    detail::WorkerGuard guard(cfg.reproducible);

    Rng rng(cfg.seed);
    CapsNetModel<T> model = CapsNetModel<T>::init(model_cfg, rng);
    OptimizerState<T> opt;
    opt.cfg = cfg.opt;
    opt.reset(model);

    TrainResult<T> result;
    TrainingSnapshot<T> best_k;  // best state at the current r
    int r = cfg.r0;
    int k = 0;
    int anchor_epoch = 0;  // epoch of the last improvement at the current r

    auto merge_global = [&]() {
        if (best_k.valid() && best_k.val_loss < result.best.val_loss) result.best = best_k;
    };

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double train_loss = detail::train_one_epoch(model, opt, cfg, train, rng, r, epoch);
        const EvalReport ev = evaluate(model, val, r, cfg.loss, cfg.batch_size,
                                       cfg.detach_couplings);
        double val_loss = ev.mean_loss;
        if (hooks.val_loss_override) val_loss = hooks.val_loss_override(epoch, val_loss);
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back({epoch, r, train_loss, val_loss, ev.accuracy,
                                  model_sparsity(model), cfg.reproducible ? 0.0 : wall});
        if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, model);

        if (val_loss >= best_k.val_loss && epoch - anchor_epoch >= cfg.patience) {
            // Annealing step.
            ++k;
            const int r_prev = r;
            r += cfg.r_step;
            const AnnealEvent event{k, epoch, r_prev, r, best_k.val_loss};
            result.anneals.push_back(event);
            merge_global();
            if (r > cfg.r_max) break;
            model = best_k.model.clone();
            opt = best_k.opt;
            rng.deserialize(best_k.rng_state);
            if (hooks.on_anneal) hooks.on_anneal(event, model);
            best_k = TrainingSnapshot<T>{};
            anchor_epoch = epoch;
        } else if (val_loss < best_k.val_loss) {
            best_k = detail::snapshot(model, opt, rng, epoch, r, val_loss);
            anchor_epoch = epoch;
        }
    }
    merge_global();
    if (!result.best.valid()) {
        result.best = detail::snapshot(model, opt, rng, std::max(0, cfg.max_epochs - 1), r,
                                       std::numeric_limits<double>::quiet_NaN());
    }
    result.r_star = result.best.r;
    return result;
}

struct GradCheckEntry {
    std::string tensor;
    double max_rel_err = 0;
    std::size_t checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0;
    bool finite = true;
};

// Central-difference check of d(total_loss)/d(theta) on a random subsample of
// parameters per tensor. Make the model double-precision; h = 1e-5 assumes
// 64-bit arithmetic. Gradients with both analytic and numeric magnitude below
// 1e-7 count as matching (they are below the finite-difference resolution).
template <typename T>
GradCheckReport grad_check(CapsNetModel<T>& model, const Tensor<T>& image, int label,
                           const RoutingOptions& ropt, const LossConfig& loss_cfg, Rng& rng,
                           std::size_t per_tensor = 200, double h = 1e-5) {
    const std::vector<int> labels{label};
    Tensor<T> batch({1, model.cfg.in_channels, model.cfg.in_h, model.cfg.in_w}, image.vals());

    // With detached couplings the analytic graph differentiates the function
    // in which the couplings are constants. Only the final iteration's
    // couplings reach the output, so the finite-difference side evaluates
    // that same function by clamping them from the unperturbed forward.
    Tensor<T> frozen_couplings;
    if (ropt.detach_couplings) {
        Tape<T> silent(false);
        frozen_couplings = capsnet_forward(silent, batch, model, ropt).couplings.detached();
    }

    auto loss_tail = [&](Tape<T>& tape, const Tensor<T>& class_poses) {
        Tensor<T> margin = margin_loss(tape, class_poses, labels, loss_cfg);
        Tensor<T> recon;
        if (model.cfg.decoder) {
            const Tensor<T> rec = decoder_forward(tape, class_poses, labels, model);
            recon = reconstruction_loss(tape, rec, batch);
        }
        return total_loss(tape, margin, recon, loss_cfg.beta);
    };
    auto forward_loss = [&](Tape<T>& tape) {
        return loss_tail(tape, capsnet_forward(tape, batch, model, ropt).class_poses);
    };
    auto forward_loss_fd = [&](Tape<T>& tape) {
        if (!ropt.detach_couplings) return forward_loss(tape);
        const Tensor<T> primary = primary_caps_forward(tape, batch, model);
        const Tensor<T> votes = ops::compute_votes(tape, primary, model.w_class);
        const Tensor<T> s = ops::coupling_weighted_sum(tape, frozen_couplings, votes);
        return loss_tail(tape, ops::squash(tape, s));
    };

    model.zero_grad();
    Tape<T> tape;
    Tensor<T> loss = forward_loss(tape);
    tape.backward(loss);

    GradCheckReport report;
    for (auto& p : model.named_params()) {
        Tensor<T>& t = *p.tensor;
        const std::vector<T> analytic = t.grad();
        std::vector<std::size_t> picks(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) picks[i] = i;
        if (t.size() > per_tensor) {
            rng.shuffle(picks);
            picks.resize(per_tensor);
        }
        GradCheckEntry entry{p.name, 0.0, picks.size()};
        for (const std::size_t i : picks) {
            const T saved = t[i];
            Tape<T> silent(false);
            t[i] = saved + static_cast<T>(h);
            const double lp = static_cast<double>(forward_loss_fd(silent).item());
            t[i] = saved - static_cast<T>(h);
            const double lm = static_cast<double>(forward_loss_fd(silent).item());
            t[i] = saved;
            const double fd = (lp - lm) / (2.0 * h);
            const double an = static_cast<double>(analytic[i]);
            if (!std::isfinite(fd) || !std::isfinite(an)) report.finite = false;
            const double denom = std::max(std::abs(an), std::abs(fd));
            const double rel = denom < 1e-7 ? 0.0 : std::abs(an - fd) / denom;
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace caps
