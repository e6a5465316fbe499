#include "fixture.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>

#include "caps/rng.hpp"

namespace fixture {

namespace {

// 5x7 digit font, bit 4 = leftmost column.
constexpr unsigned char kFont[10][7] = {
    {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E},  // 0
    {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},  // 1
    {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F},  // 2
    {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},  // 3
    {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02},  // 4
    {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},  // 5
    {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E},  // 6
    {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},  // 7
    {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E},  // 8
    {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C},  // 9
};

constexpr std::size_t kSide = 28;

// Deliberately noisy handwriting stand-in: roughly centered like scanned
// digits, with random scale, shear, per-pixel stroke intensity, occasional
// broken strokes and dilation, a distractor mark, background speckle, and a
// soft blur on most samples.
void render_digit(std::vector<float>& img, int digit, caps::Rng& rng) {
    const int scale = 2 + static_cast<int>(rng.below(2));  // 2 or 3
    const int gw = 5 * scale;
    const int gh = 7 * scale;
    const double shear = rng.uniform(-0.35, 0.35);  // column shift per row
    const int center_left = (static_cast<int>(kSide) - gw) / 2;
    const int center_top = (static_cast<int>(kSide) - gh) / 2;
    const int left = center_left + rng.uniform_int(-2, 2);
    const int top = center_top + rng.uniform_int(-2, 2);
    const bool dilate = rng.uniform() < 0.3;
    const double drop_rate = rng.uniform(0.0, 0.18);  // broken strokes
    const float base = static_cast<float>(rng.uniform(0.55, 1.0));

    auto put = [&](int y, int x, float v) {
        if (y >= 0 && x >= 0 && y < static_cast<int>(kSide) && x < static_cast<int>(kSide)) {
            auto& px = img[static_cast<std::size_t>(y) * kSide + static_cast<std::size_t>(x)];
            px = std::max(px, v);
        }
    };
    for (int row = 0; row < 7; ++row) {
        for (int col = 0; col < 5; ++col) {
            if (!(kFont[digit][row] & (1 << (4 - col)))) continue;
            for (int sy = 0; sy < scale; ++sy) {
                for (int sx = 0; sx < scale; ++sx) {
                    if (rng.uniform() < drop_rate) continue;
                    const float v = base * static_cast<float>(rng.uniform(0.6, 1.0));
                    const int yy = row * scale + sy;
                    const int y = top + yy;
                    const int x = left + col * scale + sx + static_cast<int>(shear * yy);
                    put(y, x, v);
                    if (dilate) put(y, x + 1, v * 0.5f);
                }
            }
        }
    }
    // distractor mark
    if (rng.uniform() < 0.35) {
        const int y0 = static_cast<int>(rng.below(kSide));
        const int x0 = static_cast<int>(rng.below(kSide));
        const int dy = rng.uniform_int(-1, 1);
        const int dx = rng.uniform_int(-1, 1);
        const float v = static_cast<float>(rng.uniform(0.2, 0.6));
        for (int s = 0; s < 4; ++s) put(y0 + s * dy, x0 + s * dx, v);
    }
    // background speckle
    const std::size_t speckles = 6 + rng.below(14);
    for (std::size_t s = 0; s < speckles; ++s) {
        const std::size_t p = rng.below(kSide * kSide);
        img[p] = std::max(img[p], static_cast<float>(rng.uniform(0.05, 0.4)));
    }
    // soft 3x3 blur on most samples
    if (rng.uniform() < 0.7) {
        std::vector<float> blurred(img.size(), 0.0f);
        for (int y = 0; y < static_cast<int>(kSide); ++y) {
            for (int x = 0; x < static_cast<int>(kSide); ++x) {
                float acc = 0, wsum = 0;
                for (int oy = -1; oy <= 1; ++oy) {
                    for (int ox = -1; ox <= 1; ++ox) {
                        const int yy = y + oy, xx = x + ox;
                        if (yy < 0 || xx < 0 || yy >= static_cast<int>(kSide) ||
                            xx >= static_cast<int>(kSide)) {
                            continue;
                        }
                        const float w = (oy == 0 && ox == 0) ? 4.0f : (oy == 0 || ox == 0 ? 2.0f : 1.0f);
                        acc += w * img[static_cast<std::size_t>(yy) * kSide +
                                       static_cast<std::size_t>(xx)];
                        wsum += w;
                    }
                }
                blurred[static_cast<std::size_t>(y) * kSide + static_cast<std::size_t>(x)] =
                    acc / wsum;
            }
        }
        img = std::move(blurred);
    }
}

}  // namespace

caps::Dataset synth_digits(std::size_t n, const std::vector<int>& classes, std::uint64_t seed) {
    caps::Dataset ds;
    ds.n = n;
    ds.c = 1;
    ds.h = kSide;
    ds.w = kSide;
    ds.num_classes = static_cast<int>(classes.size());
    ds.name = "synth_digits";
    ds.images.assign(n * kSide * kSide, 0.0f);
    ds.labels.resize(n);
    caps::Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cls = i % classes.size();
        ds.labels[i] = static_cast<int>(cls);
        std::vector<float> img(kSide * kSide, 0.0f);
        render_digit(img, classes[cls], rng);
        std::copy(img.begin(), img.end(), ds.images.begin() + i * kSide * kSide);
    }
    // Quantize to byte resolution so IDX round trips are exact.
    for (auto& v : ds.images) {
        v = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
    }
    return ds;
}

caps::Dataset digits_dataset(std::size_t n, const std::vector<int>& classes, std::uint64_t seed,
                             bool test_split, std::string* description) {
    const char* dir = std::getenv("CAPS_MNIST_DIR");
    if (dir != nullptr && *dir != '\0') {
        namespace fs = std::filesystem;
        const std::string img = std::string(dir) + (test_split ? "/t10k-images-idx3-ubyte"
                                                               : "/train-images-idx3-ubyte");
        const std::string lbl = std::string(dir) + (test_split ? "/t10k-labels-idx1-ubyte"
                                                               : "/train-labels-idx1-ubyte");
        if (fs::exists(img) && fs::exists(lbl)) {
            caps::Dataset ds = caps::load_idx(img, lbl);
            ds = caps::select_classes(ds, classes);
            if (test_split) {
                // Keep train/test draws disjoint by taking test samples from the end.
                if (ds.n > n) {
                    caps::Dataset tail;
                    tail.c = ds.c;
                    tail.h = ds.h;
                    tail.w = ds.w;
                    tail.num_classes = ds.num_classes;
                    tail.name = ds.name;
                    tail.n = n;
                    const std::size_t start = ds.n - n;
                    tail.labels.assign(ds.labels.begin() + static_cast<std::ptrdiff_t>(start),
                                       ds.labels.end());
                    tail.images.assign(
                        ds.images.begin() + static_cast<std::ptrdiff_t>(start * ds.sample_size()),
                        ds.images.end());
                    ds = tail;
                }
            } else {
                ds = caps::take_first(ds, n);
            }
            if (description != nullptr) *description = "mnist (" + img + ")";
            return ds;
        }
    }
    if (description != nullptr) *description = "synthetic digit fixture";
    // Distinct seed stream per split keeps train and test disjoint.
    return synth_digits(n, classes, test_split ? seed * 2654435761u + 17 : seed);
}

}  // namespace fixture
