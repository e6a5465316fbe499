#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "caps/data.hpp"

namespace fixture {

// 28x28 grayscale renderings of digit glyphs with per-sample jitter: random
// position, stroke intensity, optional dilation and background speckle.
// Labels are positions in `classes` (so {0, 1} gives a 2-class set labelled
// 0/1). Deterministic per seed.
caps::Dataset synth_digits(std::size_t n, const std::vector<int>& classes, std::uint64_t seed);

// Handwritten-digit IDX files when CAPS_MNIST_DIR points at them (reads
// train-images-idx3-ubyte / train-labels-idx1-ubyte or the t10k pair),
// otherwise the synthetic renderer above. `description` reports the source.
caps::Dataset digits_dataset(std::size_t n, const std::vector<int>& classes, std::uint64_t seed,
                             bool test_split, std::string* description);

}  // namespace fixture
