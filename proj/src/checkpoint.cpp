#include "caps/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace caps {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in host order and assume a little-endian host");

namespace {

std::array<std::uint32_t, 256> make_crc_table() {
    std::array<std::uint32_t, 256> table{};
    for (std::uint32_t i = 0; i < 256; ++i) {
        std::uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
        table[i] = c;
    }
    return table;
}

class Writer {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    std::vector<unsigned char>& out() { return buf_; }

private:
    std::vector<unsigned char> buf_;
};

class Reader {
public:
    Reader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}
    std::uint8_t u8() {
        need(1);
        return p_[pos_++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(p_[pos_++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(p_[pos_++]) << (8 * i);
        return v;
    }
    std::vector<unsigned char> bytes(std::size_t n) {
        need(n);
        std::vector<unsigned char> out(p_ + pos_, p_ + pos_ + n);
        pos_ += n;
        return out;
    }
    std::size_t remaining() const { return n_ - pos_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > n_) throw CheckpointError("checkpoint: truncated file");
    }
    const unsigned char* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
};

std::size_t dtype_size(std::uint8_t code) {
    switch (code) {
        case kDtypeF32: return 4;
        case kDtypeF64: return 8;
        case kDtypeU8: return 1;
        default: throw CheckpointError("checkpoint: unknown dtype code " + std::to_string(code));
    }
}

void write_blob(Writer& w, const NamedBlob& b) {
    w.u32(static_cast<std::uint32_t>(b.name.size()));
    w.bytes(b.name.data(), b.name.size());
    w.u8(b.dtype);
    w.u8(static_cast<std::uint8_t>(b.dims.size()));
    for (std::size_t d : b.dims) w.u64(d);
    std::size_t count = 1;
    for (std::size_t d : b.dims) count *= d;
    if (b.bytes.size() != count * dtype_size(b.dtype)) {
        throw UsageError("checkpoint: blob '" + b.name + "' payload does not match dims");
    }
    w.bytes(b.bytes.data(), b.bytes.size());
}

NamedBlob read_blob(Reader& r) {
    NamedBlob b;
    const std::uint32_t name_len = r.u32();
    const auto name_bytes = r.bytes(name_len);
    b.name.assign(name_bytes.begin(), name_bytes.end());
    b.dtype = r.u8();
    const std::uint8_t rank = r.u8();
    std::size_t count = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
        const std::uint64_t d = r.u64();
        b.dims.push_back(static_cast<std::size_t>(d));
        count *= static_cast<std::size_t>(d);
    }
    b.bytes = r.bytes(count * dtype_size(b.dtype));
    return b;
}

}  // namespace

std::uint32_t crc32(const unsigned char* data, std::size_t len) {
    static const auto table = make_crc_table();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

void write_checkpoint_file(const std::string& path, const CheckpointFile& file) {
    Writer w;
    w.bytes("CAPS", 4);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(file.tensors.size()));
    for (const auto& b : file.tensors) write_blob(w, b);
    w.u8(file.opt_kind);
    w.u64(file.opt_step);
    w.u32(static_cast<std::uint32_t>(file.opt_tensors.size()));
    for (const auto& b : file.opt_tensors) write_blob(w, b);
    w.u32(static_cast<std::uint32_t>(file.rng_state.size()));
    w.bytes(file.rng_state.data(), file.rng_state.size());
    const std::uint32_t crc = crc32(w.out().data(), w.out().size());
    w.u32(crc);

    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("checkpoint: cannot open for writing: " + path);
    os.write(reinterpret_cast<const char*>(w.out().data()),
             static_cast<std::streamsize>(w.out().size()));
    if (!os) throw CheckpointError("checkpoint: write failed: " + path);
}

CheckpointFile read_checkpoint_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("checkpoint: cannot open: " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() < 12) throw CheckpointError("checkpoint: truncated file");
    const std::uint32_t stored_crc = std::uint32_t(buf[buf.size() - 4]) |
                                     (std::uint32_t(buf[buf.size() - 3]) << 8) |
                                     (std::uint32_t(buf[buf.size() - 2]) << 16) |
                                     (std::uint32_t(buf[buf.size() - 1]) << 24);
    if (crc32(buf.data(), buf.size() - 4) != stored_crc) {
        throw CheckpointError("checkpoint: CRC mismatch (file corrupted)");
    }
    Reader r(buf.data(), buf.size() - 4);
    const auto magic = r.bytes(4);
    if (std::memcmp(magic.data(), "CAPS", 4) != 0) {
        throw CheckpointError("checkpoint: bad magic (not a checkpoint file)");
    }
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version));
    }
    CheckpointFile f;
    const std::uint32_t n_tensors = r.u32();
    for (std::uint32_t i = 0; i < n_tensors; ++i) f.tensors.push_back(read_blob(r));
    f.opt_kind = r.u8();
    f.opt_step = r.u64();
    const std::uint32_t n_opt = r.u32();
    for (std::uint32_t i = 0; i < n_opt; ++i) f.opt_tensors.push_back(read_blob(r));
    const std::uint32_t rng_len = r.u32();
    const auto rng_bytes = r.bytes(rng_len);
    f.rng_state.assign(rng_bytes.begin(), rng_bytes.end());
    return f;
}

}  // namespace caps
