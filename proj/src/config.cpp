#include "caps/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace caps {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
        const std::uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' wants an unsigned integer, got '" + v + "'");
    }
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::int64_t out = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' wants an integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' wants a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config: key '" + key + "' wants true/false, got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(static_cast<int>(parse_int(key, item)));
    }
    return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& key_table() {
    static const std::map<std::string, Setter> table = {
        {"run.out_dir", [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; }},
        {"run.seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.seed = parse_uint(k, v); }},
        {"run.reproducible", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.reproducible = parse_bool(k, v); }},

        {"model.in_channels", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.in_channels = parse_uint(k, v); }},
        {"model.in_h", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.in_h = parse_uint(k, v); }},
        {"model.in_w", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.in_w = parse_uint(k, v); }},
        {"model.conv1_channels", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.conv1_channels = parse_uint(k, v); }},
        {"model.conv1_kernel", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.conv1_kernel = parse_uint(k, v); }},
        {"model.conv1_stride", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.conv1_stride = parse_uint(k, v); }},
        {"model.primary_kernel", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.primary_kernel = parse_uint(k, v); }},
        {"model.primary_stride", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.primary_stride = parse_uint(k, v); }},
        {"model.capsule_types", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.capsule_types = parse_uint(k, v); }},
        {"model.d_primary", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.d_primary = parse_uint(k, v); }},
        {"model.d_class", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.d_class = parse_uint(k, v); }},
        {"model.num_classes", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.num_classes = parse_uint(k, v); }},
        {"model.decoder", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.decoder = parse_bool(k, v); }},
        {"model.decoder_hidden1", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.decoder_hidden1 = parse_uint(k, v); }},
        {"model.decoder_hidden2", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.decoder_hidden2 = parse_uint(k, v); }},

        {"train.optimizer", [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v == "adam") c.train.opt.kind = OptKind::Adam;
             else if (v == "sgd") c.train.opt.kind = OptKind::Sgd;
             else throw ConfigError("config: key '" + k + "' wants adam|sgd, got '" + v + "'");
         }},
        {"train.lr", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.opt.lr = parse_double(k, v); }},
        {"train.lr_decay", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.lr_decay = parse_double(k, v); }},
        {"train.batch_size", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.batch_size = parse_uint(k, v); }},
        {"train.max_epochs", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.max_epochs = static_cast<int>(parse_int(k, v)); }},
        {"train.patience", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.patience = static_cast<int>(parse_int(k, v)); }},

        {"routing.mode", [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v == "fixed") c.train.mode = RoutingMode::Fixed;
             else if (v == "annealing") c.train.mode = RoutingMode::Annealing;
             else throw ConfigError("config: key '" + k + "' wants fixed|annealing, got '" + v + "'");
         }},
        {"routing.r", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.r = static_cast<int>(parse_int(k, v)); }},
        {"routing.r0", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.r0 = static_cast<int>(parse_int(k, v)); }},
        {"routing.r_max", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.r_max = static_cast<int>(parse_int(k, v)); }},
        {"routing.step", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.r_step = static_cast<int>(parse_int(k, v)); }},
        {"routing.detach_couplings", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.detach_couplings = parse_bool(k, v); }},

        {"lobster.enabled", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.lobster.enabled = parse_bool(k, v); }},
        {"lobster.lambda", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.lobster.lambda = parse_double(k, v); }},
        {"lobster.threshold", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.lobster.threshold = parse_double(k, v); }},

        {"loss.m_plus", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.loss.m_plus = parse_double(k, v); }},
        {"loss.m_minus", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.loss.m_minus = parse_double(k, v); }},
        {"loss.lambda_down", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.loss.lambda_down = parse_double(k, v); }},
        {"loss.beta", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.loss.beta = parse_double(k, v); }},

        {"rem.levels", [](RunConfig& c, const std::string& k, const std::string& v) { c.rem_levels = static_cast<int>(parse_int(k, v)); }},
        {"rem.threshold", [](RunConfig& c, const std::string& k, const std::string& v) { c.rem_threshold = parse_double(k, v); }},
        {"rem.label_source", [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v == "predicted") c.rem_label_source = LabelSource::Predicted;
             else if (v == "true") c.rem_label_source = LabelSource::True;
             else throw ConfigError("config: key '" + k + "' wants predicted|true, got '" + v + "'");
         }},

        {"data.source", [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v != "synth" && v != "idx") {
                 throw ConfigError("config: key '" + k + "' wants synth|idx, got '" + v + "'");
             }
             c.data.source = v;
         }},
        {"data.images", [](RunConfig& c, const std::string&, const std::string& v) { c.data.images = v; }},
        {"data.labels", [](RunConfig& c, const std::string&, const std::string& v) { c.data.labels = v; }},
        {"data.test_images", [](RunConfig& c, const std::string&, const std::string& v) { c.data.test_images = v; }},
        {"data.test_labels", [](RunConfig& c, const std::string&, const std::string& v) { c.data.test_labels = v; }},
        {"data.synth_classes", [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synth_classes = static_cast<int>(parse_int(k, v)); }},
        {"data.synth_n", [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synth_n = parse_uint(k, v); }},
        {"data.synth_size", [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synth_size = parse_uint(k, v); }},
        {"data.synth_seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synth_seed = parse_uint(k, v); }},
        {"data.val_fraction", [](RunConfig& c, const std::string& k, const std::string& v) { c.data.val_fraction = parse_double(k, v); }},
        {"data.pad", [](RunConfig& c, const std::string& k, const std::string& v) { c.data.pad = parse_uint(k, v); }},
        {"data.max_shift", [](RunConfig& c, const std::string& k, const std::string& v) { c.data.max_shift = parse_uint(k, v); }},
        {"data.class_filter", [](RunConfig& c, const std::string& k, const std::string& v) { c.data.class_filter = parse_int_list(k, v); }},
        {"data.train_limit", [](RunConfig& c, const std::string& k, const std::string& v) { c.data.train_limit = parse_uint(k, v); }},
        {"data.test_limit", [](RunConfig& c, const std::string& k, const std::string& v) { c.data.test_limit = parse_uint(k, v); }},
    };
    return table;
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    train.validate();
    if (rem_levels < 2) throw ConfigError("config: rem.levels must be >= 2");
    if (rem_threshold < 0.0) throw ConfigError("config: rem.threshold must be >= 0");
    if (data.source == "idx" && (data.images.empty() || data.labels.empty())) {
        throw ConfigError("config: data.source = idx requires data.images and data.labels");
    }
    if (!(data.val_fraction > 0.0 && data.val_fraction < 1.0)) {
        throw ConfigError("config: data.val_fraction must lie strictly between 0 and 1");
    }
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(line_no) + " is not 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const auto it = key_table().find(key);
        if (it == key_table().end()) throw ConfigError("config: unknown key '" + key + "'");
        it->second(cfg, key, value);
    }
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open file: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str());
}

std::string dump_config(const RunConfig& c) {
    auto num = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.10g", v);
        return std::string(buf);
    };
    std::ostringstream os;
    os << "run.out_dir = " << c.out_dir << "\n";
    os << "run.seed = " << c.train.seed << "\n";
    os << "run.reproducible = " << (c.train.reproducible ? "true" : "false") << "\n";
    os << "model.in_channels = " << c.model.in_channels << "\n";
    os << "model.in_h = " << c.model.in_h << "\n";
    os << "model.in_w = " << c.model.in_w << "\n";
    os << "model.conv1_channels = " << c.model.conv1_channels << "\n";
    os << "model.conv1_kernel = " << c.model.conv1_kernel << "\n";
    os << "model.conv1_stride = " << c.model.conv1_stride << "\n";
    os << "model.primary_kernel = " << c.model.primary_kernel << "\n";
    os << "model.primary_stride = " << c.model.primary_stride << "\n";
    os << "model.capsule_types = " << c.model.capsule_types << "\n";
    os << "model.d_primary = " << c.model.d_primary << "\n";
    os << "model.d_class = " << c.model.d_class << "\n";
    os << "model.num_classes = " << c.model.num_classes << "\n";
    os << "model.decoder = " << (c.model.decoder ? "true" : "false") << "\n";
    os << "model.decoder_hidden1 = " << c.model.decoder_hidden1 << "\n";
    os << "model.decoder_hidden2 = " << c.model.decoder_hidden2 << "\n";
    os << "train.optimizer = " << (c.train.opt.kind == OptKind::Adam ? "adam" : "sgd") << "\n";
    os << "train.lr = " << num(c.train.opt.lr) << "\n";
    os << "train.lr_decay = " << num(c.train.lr_decay) << "\n";
    os << "train.batch_size = " << c.train.batch_size << "\n";
    os << "train.max_epochs = " << c.train.max_epochs << "\n";
    os << "train.patience = " << c.train.patience << "\n";
    os << "routing.mode = " << (c.train.mode == RoutingMode::Fixed ? "fixed" : "annealing") << "\n";
    os << "routing.r = " << c.train.r << "\n";
    os << "routing.r0 = " << c.train.r0 << "\n";
    os << "routing.r_max = " << c.train.r_max << "\n";
    os << "routing.step = " << c.train.r_step << "\n";
    os << "routing.detach_couplings = " << (c.train.detach_couplings ? "true" : "false") << "\n";
    os << "lobster.enabled = " << (c.train.lobster.enabled ? "true" : "false") << "\n";
    os << "lobster.lambda = " << num(c.train.lobster.lambda) << "\n";
    os << "lobster.threshold = " << num(c.train.lobster.threshold) << "\n";
    os << "loss.m_plus = " << num(c.train.loss.m_plus) << "\n";
    os << "loss.m_minus = " << num(c.train.loss.m_minus) << "\n";
    os << "loss.lambda_down = " << num(c.train.loss.lambda_down) << "\n";
    os << "loss.beta = " << num(c.train.loss.beta) << "\n";
    os << "rem.levels = " << c.rem_levels << "\n";
    os << "rem.threshold = " << num(c.rem_threshold) << "\n";
    os << "rem.label_source = "
       << (c.rem_label_source == LabelSource::Predicted ? "predicted" : "true") << "\n";
    os << "data.source = " << c.data.source << "\n";
    os << "data.images = " << c.data.images << "\n";
    os << "data.labels = " << c.data.labels << "\n";
    os << "data.test_images = " << c.data.test_images << "\n";
    os << "data.test_labels = " << c.data.test_labels << "\n";
    os << "data.synth_classes = " << c.data.synth_classes << "\n";
    os << "data.synth_n = " << c.data.synth_n << "\n";
    os << "data.synth_size = " << c.data.synth_size << "\n";
    os << "data.synth_seed = " << c.data.synth_seed << "\n";
    os << "data.val_fraction = " << num(c.data.val_fraction) << "\n";
    os << "data.pad = " << c.data.pad << "\n";
    os << "data.max_shift = " << c.data.max_shift << "\n";
    os << "data.class_filter = ";
    for (std::size_t i = 0; i < c.data.class_filter.size(); ++i) {
        if (i) os << ",";
        os << c.data.class_filter[i];
    }
    os << "\n";
    os << "data.train_limit = " << c.data.train_limit << "\n";
    os << "data.test_limit = " << c.data.test_limit << "\n";
    return os.str();
}

namespace {

Dataset apply_common(const DataConfig& cfg, Dataset ds, std::size_t limit, std::uint64_t aug_seed) {
    if (!cfg.class_filter.empty()) ds = select_classes(ds, cfg.class_filter);
    if (limit != 0) ds = take_first(ds, limit);
    if (cfg.pad > 0 || cfg.max_shift > 0) ds = pad_translate(ds, cfg.pad, cfg.max_shift, aug_seed);
    return ds;
}

}  // namespace

Dataset load_train_dataset(const DataConfig& cfg) {
    Dataset ds;
    if (cfg.source == "idx") {
        ds = load_idx(cfg.images, cfg.labels);
    } else {
        ds = synth_shapes(cfg.synth_n, cfg.synth_classes, cfg.synth_size, cfg.synth_seed);
    }
    return apply_common(cfg, std::move(ds), cfg.train_limit, cfg.synth_seed + 1);
}

Dataset load_test_dataset(const DataConfig& cfg) {
    Dataset ds;
    if (cfg.source == "idx") {
        if (cfg.test_images.empty() || cfg.test_labels.empty()) {
            throw ConfigError("config: data.test_images/data.test_labels are required for eval");
        }
        ds = load_idx(cfg.test_images, cfg.test_labels);
    } else {
        ds = synth_shapes(std::max<std::size_t>(1, cfg.synth_n / 4), cfg.synth_classes,
                          cfg.synth_size, cfg.synth_seed + 1000);
    }
    return apply_common(cfg, std::move(ds), cfg.test_limit, cfg.synth_seed + 2);
}

}  // namespace caps
