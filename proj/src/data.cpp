#include "caps/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "caps/rng.hpp"

namespace caps {

namespace {

std::uint32_t read_be32(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

void write_be32(std::ofstream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open file: " + path);
    is.seekg(0, std::ios::end);
    const std::streamoff len = is.tellg();
    is.seekg(0);
    std::vector<unsigned char> buf(static_cast<std::size_t>(len));
    is.read(reinterpret_cast<char*>(buf.data()), len);
    if (!is) throw DataError("cannot read file: " + path);
    return buf;
}

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

}  // namespace

void Dataset::validate() const {
    if (labels.size() != n) throw DataError("dataset: label count does not match sample count");
    if (images.size() != n * sample_size()) throw DataError("dataset: image buffer size mismatch");
    for (int l : labels) {
        if (l < 0 || l >= num_classes) {
            throw DataError("dataset: label " + std::to_string(l) + " outside [0, " +
                            std::to_string(num_classes) + ")");
        }
    }
    for (float v : images) {
        if (!(v >= 0.0f && v <= 1.0f)) throw DataError("dataset: pixel value outside [0, 1]");
    }
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    const auto img = read_file(images_path);
    const auto lbl = read_file(labels_path);
    if (img.size() < 16) throw IdxTruncatedError("idx: image file too short for header: " + images_path);
    if (lbl.size() < 8) throw IdxTruncatedError("idx: label file too short for header: " + labels_path);
    if (read_be32(img.data()) != kImagesMagic) {
        throw IdxMagicError("idx: bad image magic in " + images_path);
    }
    if (read_be32(lbl.data()) != kLabelsMagic) {
        throw IdxMagicError("idx: bad label magic in " + labels_path);
    }
    const std::size_t n = read_be32(img.data() + 4);
    const std::size_t h = read_be32(img.data() + 8);
    const std::size_t w = read_be32(img.data() + 12);
    const std::size_t n_lbl = read_be32(lbl.data() + 4);
    if (n != n_lbl) {
        throw IdxCountError("idx: image count " + std::to_string(n) + " != label count " +
                            std::to_string(n_lbl));
    }
    if (img.size() != 16 + n * h * w) throw IdxTruncatedError("idx: truncated image payload in " + images_path);
    if (lbl.size() != 8 + n) throw IdxTruncatedError("idx: truncated label payload in " + labels_path);

    Dataset ds;
    ds.n = n;
    ds.c = 1;
    ds.h = h;
    ds.w = w;
    ds.name = images_path;
    ds.images.resize(n * h * w);
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        ds.images[i] = static_cast<float>(img[16 + i]) / 255.0f;
    }
    ds.labels.resize(n);
    int max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ds.labels[i] = static_cast<int>(lbl[8 + i]);
        max_label = std::max(max_label, ds.labels[i]);
    }
    ds.num_classes = max_label + 1;
    return ds;
}

void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
    if (ds.c != 1) throw DataError("write_idx: only single-channel datasets supported");
    {
        std::ofstream os(images_path, std::ios::binary);
        if (!os) throw DataError("cannot open for writing: " + images_path);
        write_be32(os, kImagesMagic);
        write_be32(os, static_cast<std::uint32_t>(ds.n));
        write_be32(os, static_cast<std::uint32_t>(ds.h));
        write_be32(os, static_cast<std::uint32_t>(ds.w));
        std::vector<unsigned char> bytes(ds.images.size());
        for (std::size_t i = 0; i < ds.images.size(); ++i) {
            const float v = std::min(1.0f, std::max(0.0f, ds.images[i]));
            bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
        }
        os.write(reinterpret_cast<const char*>(bytes.data()),
                 static_cast<std::streamsize>(bytes.size()));
    }
    {
        std::ofstream os(labels_path, std::ios::binary);
        if (!os) throw DataError("cannot open for writing: " + labels_path);
        write_be32(os, kLabelsMagic);
        write_be32(os, static_cast<std::uint32_t>(ds.n));
        for (std::size_t i = 0; i < ds.n; ++i) {
            os.put(static_cast<char>(ds.labels[i]));
        }
    }
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double val_fraction, std::uint64_t seed) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
        throw ConfigError("split: val_fraction must lie strictly between 0 and 1");
    }
    if (ds.n == 0) throw DataError("split: dataset is empty");
    const std::size_t n_val =
        std::min<std::size_t>(ds.n - 1, std::max<std::size_t>(1, static_cast<std::size_t>(
            std::llround(static_cast<double>(ds.n) * val_fraction))));
    std::vector<std::size_t> order(ds.n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(order);

    auto gather = [&](std::size_t begin, std::size_t end) {
        Dataset out;
        out.c = ds.c;
        out.h = ds.h;
        out.w = ds.w;
        out.num_classes = ds.num_classes;
        out.name = ds.name;
        out.n = end - begin;
        out.images.resize(out.n * ds.sample_size());
        out.labels.resize(out.n);
        for (std::size_t i = begin; i < end; ++i) {
            const std::size_t src = order[i];
            std::copy(ds.image(src), ds.image(src) + ds.sample_size(),
                      out.images.begin() + (i - begin) * ds.sample_size());
            out.labels[i - begin] = ds.labels[src];
        }
        return out;
    };
    return {gather(n_val, ds.n), gather(0, n_val)};
}

Dataset pad_translate(const Dataset& ds, std::size_t pad, std::size_t max_shift, std::uint64_t seed) {
    if (max_shift > pad) throw ConfigError("pad_translate: max_shift must not exceed pad");
    Dataset out;
    out.n = ds.n;
    out.c = ds.c;
    out.h = ds.h + 2 * pad;
    out.w = ds.w + 2 * pad;
    out.num_classes = ds.num_classes;
    out.labels = ds.labels;
    out.name = ds.name;
    out.images.assign(out.n * out.sample_size(), 0.0f);
    Rng rng(seed);
    const int ms = static_cast<int>(max_shift);
    for (std::size_t i = 0; i < ds.n; ++i) {
        const int dy = ms == 0 ? 0 : rng.uniform_int(-ms, ms);
        const int dx = ms == 0 ? 0 : rng.uniform_int(-ms, ms);
        for (std::size_t ch = 0; ch < ds.c; ++ch) {
            for (std::size_t y = 0; y < ds.h; ++y) {
                for (std::size_t x = 0; x < ds.w; ++x) {
                    const std::size_t oy = static_cast<std::size_t>(static_cast<int>(y + pad) + dy);
                    const std::size_t ox = static_cast<std::size_t>(static_cast<int>(x + pad) + dx);
                    out.images[((i * out.c + ch) * out.h + oy) * out.w + ox] =
                        ds.images[((i * ds.c + ch) * ds.h + y) * ds.w + x];
                }
            }
        }
    }
    return out;
}

namespace {

// Draws one glyph with intensity 1 into a g x g box placed at (top, left).
void draw_glyph(std::vector<float>& img, std::size_t side, int glyph, std::size_t top,
                std::size_t left, std::size_t g) {
    auto set = [&](std::size_t y, std::size_t x) {
        if (y < side && x < side) img[y * side + x] = 1.0f;
    };
    const std::size_t mid = g / 2;
    switch (glyph) {
        case 0:  // bar
            for (std::size_t x = 0; x < g; ++x) {
                set(top + mid - 1, left + x);
                set(top + mid, left + x);
            }
            break;
        case 1:  // cross
            for (std::size_t x = 0; x < g; ++x) {
                set(top + mid, left + x);
                set(top + x, left + mid);
            }
            break;
        case 2:  // box
            for (std::size_t x = 0; x < g; ++x) {
                set(top, left + x);
                set(top + g - 1, left + x);
                set(top + x, left);
                set(top + x, left + g - 1);
            }
            break;
        case 3:  // diag
            for (std::size_t x = 0; x < g; ++x) {
                set(top + x, left + x);
                if (x + 1 < g) set(top + x + 1, left + x);
            }
            break;
        case 4: {  // ring
            const double r = static_cast<double>(g) / 2.0 - 1.0;
            const double cy = top + static_cast<double>(g - 1) / 2.0;
            const double cx = left + static_cast<double>(g - 1) / 2.0;
            for (std::size_t y = 0; y < g; ++y) {
                for (std::size_t x = 0; x < g; ++x) {
                    const double d = std::hypot(top + y - cy, left + x - cx);
                    if (std::abs(d - r) <= 0.8) set(top + y, left + x);
                }
            }
            break;
        }
        default: {  // dot
            const double r = static_cast<double>(g) / 4.0;
            const double cy = top + static_cast<double>(g - 1) / 2.0;
            const double cx = left + static_cast<double>(g - 1) / 2.0;
            for (std::size_t y = 0; y < g; ++y) {
                for (std::size_t x = 0; x < g; ++x) {
                    if (std::hypot(top + y - cy, left + x - cx) <= r) set(top + y, left + x);
                }
            }
            break;
        }
    }
}

}  // namespace

Dataset synth_shapes(std::size_t n, int classes, std::size_t size, std::uint64_t seed) {
    if (classes < 2 || classes > 6) throw ConfigError("synth_shapes: classes must lie in {2..6}");
    if (size < 12) throw ConfigError("synth_shapes: size must be >= 12");
    Dataset ds;
    ds.n = n;
    ds.c = 1;
    ds.h = size;
    ds.w = size;
    ds.num_classes = classes;
    ds.name = "synth_shapes";
    ds.images.assign(n * size * size, 0.0f);
    ds.labels.resize(n);
    Rng rng(seed);
    const std::size_t g = size / 2;
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % static_cast<std::size_t>(classes));
        ds.labels[i] = label;
        const std::size_t top = 1 + rng.below(size - g - 1);
        const std::size_t left = 1 + rng.below(size - g - 1);
        std::vector<float> img(size * size, 0.0f);
        draw_glyph(img, size, label, top, left, g);
        std::copy(img.begin(), img.end(), ds.images.begin() + i * size * size);
    }
    return ds;
}

Dataset select_classes(const Dataset& ds, const std::vector<int>& keep) {
    if (keep.empty()) throw ConfigError("select_classes: class list is empty");
    std::vector<int> relabel(static_cast<std::size_t>(ds.num_classes), -1);
    for (std::size_t k = 0; k < keep.size(); ++k) {
        if (keep[k] < 0 || keep[k] >= ds.num_classes) {
            throw ConfigError("select_classes: class " + std::to_string(keep[k]) + " out of range");
        }
        relabel[static_cast<std::size_t>(keep[k])] = static_cast<int>(k);
    }
    Dataset out;
    out.c = ds.c;
    out.h = ds.h;
    out.w = ds.w;
    out.num_classes = static_cast<int>(keep.size());
    out.name = ds.name;
    for (std::size_t i = 0; i < ds.n; ++i) {
        const int nl = relabel[static_cast<std::size_t>(ds.labels[i])];
        if (nl < 0) continue;
        out.labels.push_back(nl);
        out.images.insert(out.images.end(), ds.image(i), ds.image(i) + ds.sample_size());
    }
    out.n = out.labels.size();
    return out;
}

Dataset take_first(const Dataset& ds, std::size_t limit) {
    if (limit == 0 || limit >= ds.n) return ds;
    Dataset out = ds;
    out.n = limit;
    out.labels.assign(ds.labels.begin(), ds.labels.begin() + static_cast<std::ptrdiff_t>(limit));
    out.images.assign(ds.images.begin(),
                      ds.images.begin() + static_cast<std::ptrdiff_t>(limit * ds.sample_size()));
    return out;
}

}  // namespace caps
