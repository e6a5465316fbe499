#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "caps/losses.hpp"
#include "caps/training.hpp"

namespace caps {

// Binary checkpoint layout (all integers little-endian):
//   magic "CAPS"
//   u32 format version
//   u32 tensor count, then per tensor:
//     u32 name length, UTF-8 name, u8 dtype (0=f32, 1=f64, 2=u8),
//     u8 rank, u64 dims, raw little-endian payload
//   optimizer block: u8 kind (0=sgd, 1=adam), u64 step count,
//     u32 state-tensor count, state tensors in the same encoding
//   rng block: u32 length, serialized generator state
//   u32 CRC-32 over every preceding byte

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum : std::uint8_t { kDtypeF32 = 0, kDtypeF64 = 1, kDtypeU8 = 2 };

struct NamedBlob {
    std::string name;
    std::uint8_t dtype = kDtypeF32;
    Shape dims;
    std::vector<unsigned char> bytes;
};

struct CheckpointFile {
    std::vector<NamedBlob> tensors;
    std::uint8_t opt_kind = 1;
    std::uint64_t opt_step = 0;
    std::vector<NamedBlob> opt_tensors;
    std::string rng_state;
};

std::uint32_t crc32(const unsigned char* data, std::size_t len);
void write_checkpoint_file(const std::string& path, const CheckpointFile& file);
CheckpointFile read_checkpoint_file(const std::string& path);

namespace detail {

template <typename T>
constexpr std::uint8_t dtype_code() {
    return sizeof(T) == 4 ? kDtypeF32 : kDtypeF64;
}

template <typename T>
NamedBlob blob_from_values(const std::string& name, const Shape& dims, const std::vector<T>& v) {
    NamedBlob b;
    b.name = name;
    b.dtype = dtype_code<T>();
    b.dims = dims;
    b.bytes.resize(v.size() * sizeof(T));
    std::memcpy(b.bytes.data(), v.data(), b.bytes.size());
    return b;
}

inline NamedBlob blob_from_mask(const std::string& name, const std::vector<std::uint8_t>& v) {
    NamedBlob b;
    b.name = name;
    b.dtype = kDtypeU8;
    b.dims = {v.size()};
    b.bytes.assign(v.begin(), v.end());
    return b;
}

inline NamedBlob blob_scalar(const std::string& name, double v) {
    return blob_from_values<double>(name, {}, {v});
}

template <typename T>
std::vector<T> values_from_blob(const NamedBlob& b) {
    std::vector<T> out;
    if (b.dtype == kDtypeF32) {
        std::vector<float> tmp(b.bytes.size() / sizeof(float));
        std::memcpy(tmp.data(), b.bytes.data(), b.bytes.size());
        out.assign(tmp.begin(), tmp.end());
    } else if (b.dtype == kDtypeF64) {
        std::vector<double> tmp(b.bytes.size() / sizeof(double));
        std::memcpy(tmp.data(), b.bytes.data(), b.bytes.size());
        out.assign(tmp.begin(), tmp.end());
    } else {
        throw CheckpointError("checkpoint: tensor '" + b.name + "' has a non-numeric dtype");
    }
    return out;
}

inline const NamedBlob& find_blob(const std::vector<NamedBlob>& blobs, const std::string& name) {
    for (const auto& b : blobs) {
        if (b.name == name) return b;
    }
    throw CheckpointError("checkpoint: missing tensor '" + name + "'");
}

inline double scalar_from(const std::vector<NamedBlob>& blobs, const std::string& name) {
    const NamedBlob& b = find_blob(blobs, name);
    const auto v = values_from_blob<double>(b);
    if (v.size() != 1) throw CheckpointError("checkpoint: '" + name + "' is not a scalar");
    return v[0];
}

}  // namespace detail

template <typename T>
CheckpointFile checkpoint_from_snapshot(const TrainingSnapshot<T>& snap, const LossConfig& loss) {
    CheckpointFile f;
    const ModelConfig& cfg = snap.model.cfg;
    auto& model = const_cast<CapsNetModel<T>&>(snap.model);

    auto push_cfg = [&](const std::string& key, double v) {
        f.tensors.push_back(detail::blob_scalar("cfg." + key, v));
    };
    push_cfg("in_channels", static_cast<double>(cfg.in_channels));
    push_cfg("in_h", static_cast<double>(cfg.in_h));
    push_cfg("in_w", static_cast<double>(cfg.in_w));
    push_cfg("conv1_channels", static_cast<double>(cfg.conv1_channels));
    push_cfg("conv1_kernel", static_cast<double>(cfg.conv1_kernel));
    push_cfg("conv1_stride", static_cast<double>(cfg.conv1_stride));
    push_cfg("primary_kernel", static_cast<double>(cfg.primary_kernel));
    push_cfg("primary_stride", static_cast<double>(cfg.primary_stride));
    push_cfg("capsule_types", static_cast<double>(cfg.capsule_types));
    push_cfg("d_primary", static_cast<double>(cfg.d_primary));
    push_cfg("d_class", static_cast<double>(cfg.d_class));
    push_cfg("num_classes", static_cast<double>(cfg.num_classes));
    push_cfg("decoder", cfg.decoder ? 1.0 : 0.0);
    push_cfg("decoder_hidden1", static_cast<double>(cfg.decoder_hidden1));
    push_cfg("decoder_hidden2", static_cast<double>(cfg.decoder_hidden2));

    f.tensors.push_back(detail::blob_scalar("meta.epoch", static_cast<double>(snap.epoch)));
    f.tensors.push_back(detail::blob_scalar("meta.r", static_cast<double>(snap.r)));
    f.tensors.push_back(detail::blob_scalar("meta.best_val_loss", snap.val_loss));
    f.tensors.push_back(detail::blob_scalar("meta.loss.m_plus", loss.m_plus));
    f.tensors.push_back(detail::blob_scalar("meta.loss.m_minus", loss.m_minus));
    f.tensors.push_back(detail::blob_scalar("meta.loss.lambda_down", loss.lambda_down));
    f.tensors.push_back(detail::blob_scalar("meta.loss.beta", loss.beta));

    for (auto& p : model.named_params()) {
        f.tensors.push_back(
            detail::blob_from_values<T>(p.name, p.tensor->shape(), p.tensor->vals()));
    }
    f.tensors.push_back(
        detail::blob_from_values<T>("b_prior", model.b_prior.shape(), model.b_prior.vals()));
    f.tensors.push_back(detail::blob_from_mask("frozen.conv1_w", model.frozen_conv1));
    f.tensors.push_back(detail::blob_from_mask("frozen.primary_w", model.frozen_primary));
    f.tensors.push_back(detail::blob_from_mask("frozen.w_class", model.frozen_w));

    f.opt_kind = snap.opt.cfg.kind == OptKind::Adam ? 1 : 0;
    f.opt_step = static_cast<std::uint64_t>(snap.opt.step_count);
    f.opt_tensors.push_back(detail::blob_scalar("opt.lr", snap.opt.cfg.lr));
    f.opt_tensors.push_back(detail::blob_scalar("opt.beta1", snap.opt.cfg.beta1));
    f.opt_tensors.push_back(detail::blob_scalar("opt.beta2", snap.opt.cfg.beta2));
    f.opt_tensors.push_back(detail::blob_scalar("opt.eps", snap.opt.cfg.eps));
    if (snap.opt.cfg.kind == OptKind::Adam) {
        auto params = model.named_params();
        for (std::size_t i = 0; i < params.size() && i < snap.opt.m.size(); ++i) {
            f.opt_tensors.push_back(detail::blob_from_values<T>(
                "opt.m." + params[i].name, params[i].tensor->shape(), snap.opt.m[i]));
            f.opt_tensors.push_back(detail::blob_from_values<T>(
                "opt.v." + params[i].name, params[i].tensor->shape(), snap.opt.v[i]));
        }
    }
    f.rng_state = snap.rng_state;
    return f;
}

template <typename T>
TrainingSnapshot<T> snapshot_from_checkpoint(const CheckpointFile& f, LossConfig* loss_out = nullptr) {
    ModelConfig cfg;
    auto geti = [&](const std::string& key) {
        return static_cast<std::size_t>(detail::scalar_from(f.tensors, "cfg." + key));
    };
    cfg.in_channels = geti("in_channels");
    cfg.in_h = geti("in_h");
    cfg.in_w = geti("in_w");
    cfg.conv1_channels = geti("conv1_channels");
    cfg.conv1_kernel = geti("conv1_kernel");
    cfg.conv1_stride = geti("conv1_stride");
    cfg.primary_kernel = geti("primary_kernel");
    cfg.primary_stride = geti("primary_stride");
    cfg.capsule_types = geti("capsule_types");
    cfg.d_primary = geti("d_primary");
    cfg.d_class = geti("d_class");
    cfg.num_classes = geti("num_classes");
    cfg.decoder = detail::scalar_from(f.tensors, "cfg.decoder") != 0.0;
    cfg.decoder_hidden1 = geti("decoder_hidden1");
    cfg.decoder_hidden2 = geti("decoder_hidden2");
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint: invalid model config: ") + e.what());
    }

    TrainingSnapshot<T> snap;
    Rng dummy(0);
    snap.model = CapsNetModel<T>::init(cfg, dummy);
    for (auto& p : snap.model.named_params()) {
        const NamedBlob& b = detail::find_blob(f.tensors, p.name);
        auto vals = detail::values_from_blob<T>(b);
        if (vals.size() != p.tensor->size()) {
            throw CheckpointError("checkpoint: tensor '" + p.name + "' has " +
                                  std::to_string(vals.size()) + " values, expected " +
                                  std::to_string(p.tensor->size()));
        }
        p.tensor->vals() = std::move(vals);
    }
    {
        const NamedBlob& b = detail::find_blob(f.tensors, "b_prior");
        auto vals = detail::values_from_blob<T>(b);
        if (vals.size() != snap.model.b_prior.size()) {
            throw CheckpointError("checkpoint: b_prior size mismatch");
        }
        snap.model.b_prior.vals() = std::move(vals);
    }
    auto load_mask = [&](const std::string& name, std::vector<std::uint8_t>& mask) {
        const NamedBlob& b = detail::find_blob(f.tensors, name);
        if (b.dtype != kDtypeU8 || b.bytes.size() != mask.size()) {
            throw CheckpointError("checkpoint: bad mask '" + name + "'");
        }
        mask.assign(b.bytes.begin(), b.bytes.end());
    };
    load_mask("frozen.conv1_w", snap.model.frozen_conv1);
    load_mask("frozen.primary_w", snap.model.frozen_primary);
    load_mask("frozen.w_class", snap.model.frozen_w);

    snap.epoch = static_cast<int>(detail::scalar_from(f.tensors, "meta.epoch"));
    snap.r = static_cast<int>(detail::scalar_from(f.tensors, "meta.r"));
    snap.val_loss = detail::scalar_from(f.tensors, "meta.best_val_loss");
    if (loss_out != nullptr) {
        loss_out->m_plus = detail::scalar_from(f.tensors, "meta.loss.m_plus");
        loss_out->m_minus = detail::scalar_from(f.tensors, "meta.loss.m_minus");
        loss_out->lambda_down = detail::scalar_from(f.tensors, "meta.loss.lambda_down");
        loss_out->beta = detail::scalar_from(f.tensors, "meta.loss.beta");
    }

    snap.opt.cfg.kind = f.opt_kind == 1 ? OptKind::Adam : OptKind::Sgd;
    snap.opt.cfg.lr = detail::scalar_from(f.opt_tensors, "opt.lr");
    snap.opt.cfg.beta1 = detail::scalar_from(f.opt_tensors, "opt.beta1");
    snap.opt.cfg.beta2 = detail::scalar_from(f.opt_tensors, "opt.beta2");
    snap.opt.cfg.eps = detail::scalar_from(f.opt_tensors, "opt.eps");
    snap.opt.step_count = static_cast<std::int64_t>(f.opt_step);
    if (snap.opt.cfg.kind == OptKind::Adam) {
        for (auto& p : snap.model.named_params()) {
            const NamedBlob* mb = nullptr;
            const NamedBlob* vb = nullptr;
            for (const auto& b : f.opt_tensors) {
                if (b.name == "opt.m." + p.name) mb = &b;
                if (b.name == "opt.v." + p.name) vb = &b;
            }
            if (mb == nullptr || vb == nullptr) {
                if (f.opt_step != 0) {
                    throw CheckpointError("checkpoint: missing optimizer state for '" + p.name + "'");
                }
                snap.opt.m.emplace_back(p.tensor->size(), T(0));
                snap.opt.v.emplace_back(p.tensor->size(), T(0));
                continue;
            }
            snap.opt.m.push_back(detail::values_from_blob<T>(*mb));
            snap.opt.v.push_back(detail::values_from_blob<T>(*vb));
        }
    }
    snap.rng_state = f.rng_state;
    return snap;
}

}  // namespace caps
