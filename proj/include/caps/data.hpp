#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "caps/error.hpp"

namespace caps {

// Immutable once loaded; values are normalized to [0, 1].
struct Dataset {
    std::vector<float> images;  // n * c * h * w, row-major
    std::vector<int> labels;    // n entries in [0, num_classes)
    std::size_t n = 0, c = 1, h = 0, w = 0;
    int num_classes = 0;
    std::string name;

    std::size_t sample_size() const { return c * h * w; }
    const float* image(std::size_t i) const { return images.data() + i * sample_size(); }
    void validate() const;
};

// IDX readers/writers (big-endian dims, magic 0x00000803 for u8 images and
// 0x00000801 for u8 labels). Pixel bytes are scaled by 1/255.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

// Deterministic shuffled split into (train, val); disjoint and exhaustive.
std::pair<Dataset, Dataset> split(const Dataset& ds, double val_fraction, std::uint64_t seed);

// Centers each image on a black canvas grown by `pad` on every side, then
// shifts it by uniform random integer offsets in [-max_shift, max_shift]^2.
Dataset pad_translate(const Dataset& ds, std::size_t pad, std::size_t max_shift, std::uint64_t seed);

// Binary glyphs (bar/cross/box/diag/ring/dot) at random positions; class
// labels cycle so the set is balanced within one sample.
Dataset synth_shapes(std::size_t n, int classes, std::size_t size, std::uint64_t seed);

// Keeps only the listed labels (relabelled to 0..k-1 in list order), then
// optionally truncates to the first `limit` samples.
Dataset select_classes(const Dataset& ds, const std::vector<int>& keep);
Dataset take_first(const Dataset& ds, std::size_t limit);

}  // namespace caps
