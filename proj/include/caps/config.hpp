#pragma once

#include <string>
#include <vector>

#include "caps/model.hpp"
#include "caps/rem.hpp"
#include "caps/training.hpp"

namespace caps {

struct DataConfig {
    std::string source = "synth";  // synth | idx
    std::string images, labels;           // training files (idx)
    std::string test_images, test_labels; // optional held-out files
    int synth_classes = 2;
    std::size_t synth_n = 512;
    std::size_t synth_size = 16;
    std::uint64_t synth_seed = 7;
    double val_fraction = 0.05;
    std::size_t pad = 0;
    std::size_t max_shift = 0;
    std::vector<int> class_filter;  // empty = keep all
    std::size_t train_limit = 0;    // 0 = all
    std::size_t test_limit = 0;
};

// Everything one run needs; every field has a default and unknown keys are
// rejected when parsing.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    int rem_levels = 11;
    LabelSource rem_label_source = LabelSource::Predicted;
    double rem_threshold = 0.1;
    std::string out_dir = "run";

    void validate() const;
};

RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

// Complete key = value dump of the resolved configuration, stable order.
std::string dump_config(const RunConfig& cfg);

// Loads the training split described by `data` (before splitting).
Dataset load_train_dataset(const DataConfig& data);
// Loads the test split; falls back to a disjoint synthetic draw for synth.
Dataset load_test_dataset(const DataConfig& data);

}  // namespace caps
