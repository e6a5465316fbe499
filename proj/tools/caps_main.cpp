#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "caps/checkpoint.hpp"
#include "caps/config.hpp"
#include "caps/rem.hpp"

namespace fs = std::filesystem;

namespace {

struct DataFlags {
    std::string images, labels;
    int synth_classes = 2;
    std::size_t synth_n = 256;
    std::size_t synth_size = 16;
    std::uint64_t synth_seed = 7;

    void attach(CLI::App* cmd) {
        cmd->add_option("--images", images, "IDX image file");
        cmd->add_option("--labels", labels, "IDX label file");
        cmd->add_option("--synth-classes", synth_classes, "synthetic shape classes (2-6)");
        cmd->add_option("--synth-n", synth_n, "synthetic sample count");
        cmd->add_option("--synth-size", synth_size, "synthetic image side");
        cmd->add_option("--synth-seed", synth_seed, "synthetic generator seed");
    }

    caps::Dataset load() const {
        if (!images.empty() || !labels.empty()) {
            if (images.empty() || labels.empty()) {
                throw caps::ConfigError("both --images and --labels are required for IDX input");
            }
            return caps::load_idx(images, labels);
        }
        return caps::synth_shapes(synth_n, synth_classes, synth_size, synth_seed);
    }
};

std::string fmt(double v, const char* spec = "%.6f") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return std::string(buf);
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw caps::DataError("cannot open for writing: " + path);
    os << text;
}

std::string metrics_csv(const std::vector<caps::EpochStats>& history) {
    std::ostringstream os;
    os << "epoch,r,train_loss,val_loss,val_acc,sparsity,wall_seconds\n";
    for (const auto& row : history) {
        os << row.epoch << ',' << row.r << ',' << fmt(row.train_loss) << ',' << fmt(row.val_loss)
           << ',' << fmt(row.val_acc) << ',' << fmt(row.sparsity) << ','
           << fmt(row.wall_seconds, "%.3f") << '\n';
    }
    return os.str();
}

caps::TrainingSnapshot<float> load_snapshot(const std::string& path, caps::LossConfig* loss) {
    return caps::snapshot_from_checkpoint<float>(caps::read_checkpoint_file(path), loss);
}

int cmd_train(const std::string& config_path, const std::string& out_override) {
    caps::RunConfig cfg = caps::parse_config_file(config_path);
    if (!out_override.empty()) cfg.out_dir = out_override;
    cfg.validate();

    caps::Dataset full = caps::load_train_dataset(cfg.data);
    if (static_cast<std::size_t>(full.num_classes) != cfg.model.num_classes) {
        throw caps::ConfigError("config: model.num_classes = " +
                                std::to_string(cfg.model.num_classes) +
                                " does not match the dataset's " +
                                std::to_string(full.num_classes) + " classes");
    }
    auto [train_split, val_split] = caps::split(full, cfg.data.val_fraction, cfg.train.seed);

    caps::TrainResult<float> result;
    if (cfg.train.mode == caps::RoutingMode::Fixed) {
        result = caps::train_fixed_routing<float>(cfg.model, cfg.train, train_split, val_split);
    } else {
        result = caps::train_routing_annealing<float>(cfg.model, cfg.train, train_split, val_split);
    }

    fs::create_directories(cfg.out_dir);
    write_text_file(cfg.out_dir + "/metrics.csv", metrics_csv(result.history));
    write_text_file(cfg.out_dir + "/config.resolved.cfg", caps::dump_config(cfg));
    caps::write_checkpoint_file(cfg.out_dir + "/model.ckpt",
                                caps::checkpoint_from_snapshot(result.best, cfg.train.loss));

    std::cout << "epochs " << result.history.size() << "\n";
    std::cout << "best_epoch " << result.best.epoch << "\n";
    std::cout << "r_star " << result.r_star << "\n";
    std::cout << "best_val_loss " << fmt(result.best.val_loss) << "\n";
    std::cout << "sparsity " << fmt(caps::model_sparsity(result.best.model)) << "\n";
    std::cout << "artifacts " << cfg.out_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const DataFlags& data, int r_override) {
    caps::LossConfig loss;
    const auto snap = load_snapshot(ckpt, &loss);
    const caps::Dataset ds = data.load();
    const int r = r_override > 0 ? r_override : snap.r;
    const caps::EvalReport rep = caps::evaluate(snap.model, ds, r, loss);
    std::cout << "samples " << ds.n << "\n";
    std::cout << "r " << r << "\n";
    std::cout << "accuracy " << fmt(rep.accuracy) << "\n";
    std::cout << "mean_loss " << fmt(rep.mean_loss) << "\n";
    for (std::size_t j = 0; j < rep.per_class_accuracy.size(); ++j) {
        std::cout << "class " << j << " accuracy " << fmt(rep.per_class_accuracy[j]) << " count "
                  << rep.per_class_count[j] << "\n";
    }
    return 0;
}

int cmd_rem(const std::string& ckpt, const DataFlags& data, int levels,
            const std::string& label_source, int r_override, const std::string& out_dir) {
    if (levels < 2) throw caps::ConfigError("rem: --k must be >= 2");
    caps::LabelSource source;
    if (label_source == "predicted") {
        source = caps::LabelSource::Predicted;
    } else if (label_source == "true") {
        source = caps::LabelSource::True;
    } else {
        throw caps::ConfigError("rem: --label-source wants predicted|true");
    }
    caps::LossConfig loss;
    const auto snap = load_snapshot(ckpt, &loss);
    const caps::Dataset ds = data.load();
    const int r = r_override > 0 ? r_override : snap.r;

    const caps::ParseTreeDictionary dict = caps::build_dictionary(snap.model, ds, levels, source, r);
    const caps::EntropyReport rep = caps::entropy_report(dict, caps::model_sparsity(snap.model));

    fs::create_directories(out_dir);
    {
        std::ofstream os(out_dir + "/entropy.csv", std::ios::binary);
        caps::write_entropy_csv(rep, os);
    }
    {
        std::ofstream os(out_dir + "/couplings.csv", std::ios::binary);
        caps::dump_couplings_csv(snap.model, ds, r, os);
    }
    std::cout << "levels " << levels << "\n";
    std::cout << "r " << r << "\n";
    std::cout << "mean_entropy_bits " << fmt(rep.mean_bits) << "\n";
    std::cout << "sparsity " << fmt(rep.model_sparsity) << "\n";
    std::cout << "artifacts " << out_dir << "\n";
    return 0;
}

caps::Tensor<float> fetch_image(const caps::Dataset& ds, std::size_t index) {
    if (index >= ds.n) {
        throw caps::DataError("image index " + std::to_string(index) + " out of range [0, " +
                              std::to_string(ds.n) + ")");
    }
    std::vector<float> pix(ds.image(index), ds.image(index) + ds.sample_size());
    return caps::Tensor<float>({ds.c, ds.h, ds.w}, std::move(pix));
}

int cmd_saliency(const std::string& ckpt, const DataFlags& data, std::size_t index, int levels,
                 int r_override, const std::string& out_prefix) {
    caps::LossConfig loss;
    const auto snap = load_snapshot(ckpt, &loss);
    const caps::Dataset ds = data.load();
    const int r = r_override > 0 ? r_override : snap.r;
    const caps::SaliencyMap map = caps::saliency_map(snap.model, fetch_image(ds, index), levels, r);
    caps::write_pgm(out_prefix + ".grid.pgm", map.grid_w, map.grid_h, map.grid);
    caps::write_pgm(out_prefix + ".input.pgm", map.image_w, map.image_h, map.upsampled);
    std::cout << "grid " << map.grid_w << "x" << map.grid_h << "\n";
    std::cout << "input " << map.image_w << "x" << map.image_h << "\n";
    std::cout << "artifacts " << out_prefix << ".grid.pgm " << out_prefix << ".input.pgm\n";
    return 0;
}

int cmd_parsetree(const std::string& ckpt, const DataFlags& data, std::size_t index,
                  double threshold, int levels, int r_override, const std::string& out_path) {
    caps::LossConfig loss;
    const auto snap = load_snapshot(ckpt, &loss);
    const caps::Dataset ds = data.load();
    const int r = r_override > 0 ? r_override : snap.r;
    write_text_file(out_path,
                    caps::parse_tree_dot(snap.model, fetch_image(ds, index), threshold, levels, r));
    std::cout << "artifacts " << out_path << "\n";
    return 0;
}

int cmd_dump_couplings(const std::string& ckpt, const DataFlags& data, int r_override,
                       const std::string& out_path) {
    caps::LossConfig loss;
    const auto snap = load_snapshot(ckpt, &loss);
    const caps::Dataset ds = data.load();
    const int r = r_override > 0 ? r_override : snap.r;
    std::ofstream os(out_path, std::ios::binary);
    if (!os) throw caps::DataError("cannot open for writing: " + out_path);
    caps::dump_couplings_csv(snap.model, ds, r, os);
    std::cout << "artifacts " << out_path << "\n";
    return 0;
}

// Double-precision finite-difference check on the 8x8 micro model for
// r in {1, 3}, with routing both unrolled and with detached couplings.
int cmd_gradcheck(std::uint64_t seed, double threshold) {
    caps::ModelConfig cfg;
    cfg.in_channels = 1;
    cfg.in_h = 8;
    cfg.in_w = 8;
    cfg.conv1_channels = 4;
    cfg.conv1_kernel = 3;
    cfg.conv1_stride = 1;
    cfg.primary_kernel = 3;
    cfg.primary_stride = 2;
    cfg.capsule_types = 1;
    cfg.d_primary = 2;
    cfg.d_class = 2;
    cfg.num_classes = 2;
    cfg.decoder = true;
    cfg.decoder_hidden1 = 16;
    cfg.decoder_hidden2 = 24;

    caps::LossConfig loss;
    double worst = 0;
    bool all_finite = true;
    for (const bool detach : {false, true}) {
        for (const int r : {1, 3}) {
            caps::Rng rng(seed);
            auto model = caps::CapsNetModel<double>::init(cfg, rng);
            // Move every parameter to a generic operating point: the default
            // init leaves decoder pre-activations within finite-difference
            // range of the ReLU kinks.
            for (auto& p : model.named_params()) {
                for (auto& v : p.tensor->vals()) v = rng.uniform(-0.5, 0.5);
            }
            caps::Tensor<double> image({cfg.in_channels, cfg.in_h, cfg.in_w});
            for (auto& v : image.vals()) v = rng.uniform();
            caps::Rng pick_rng(seed + 17);
            const caps::GradCheckReport rep = caps::grad_check<double>(
                model, image, 1, caps::RoutingOptions{r, detach}, loss, pick_rng, 200, 1e-5);
            std::size_t checked = 0;
            for (const auto& e : rep.entries) checked += e.checked;
            std::cout << "gradcheck r=" << r << " mode=" << (detach ? "detached" : "unrolled")
                      << " params=" << checked << " max_rel_err=" << fmt(rep.max_rel_err, "%.3e")
                      << (rep.max_rel_err < threshold && rep.finite ? " PASS" : " FAIL") << "\n";
            worst = std::max(worst, rep.max_rel_err);
            all_finite = all_finite && rep.finite;
        }
    }
    std::cout << "gradcheck overall max_rel_err=" << fmt(worst, "%.3e")
              << " threshold=" << fmt(threshold, "%.0e")
              << (worst < threshold && all_finite ? " PASS" : " FAIL") << "\n";
    return worst < threshold && all_finite ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DR-CapsNet training, routing annealing and routing-entropy analysis"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ckpt, out_path, label_source = "predicted";
    std::size_t index = 0;
    int r_override = 0, levels = 11;
    double threshold = 0.1, gc_threshold = 1e-4;
    std::uint64_t gc_seed = 1;
    DataFlags data;

    auto* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("--config", config_path, "flat key = value config file")->required();
    train->add_option("--out", out_dir, "override run.out_dir");

    auto* eval = app.add_subcommand("eval", "accuracy report for a checkpoint");
    eval->add_option("--ckpt", ckpt, "checkpoint file")->required();
    eval->add_option("--r", r_override, "routing iterations (default: checkpoint's)");
    data.attach(eval);

    auto* rem = app.add_subcommand("rem", "entropy report and coupling dump");
    rem->add_option("--ckpt", ckpt, "checkpoint file")->required();
    rem->add_option("--k", levels, "quantization levels");
    rem->add_option("--label-source", label_source, "predicted|true");
    rem->add_option("--r", r_override, "routing iterations (default: checkpoint's)");
    rem->add_option("--out", out_dir, "output directory")->required();
    data.attach(rem);

    auto* sal = app.add_subcommand("saliency", "saliency map PGMs for one image");
    sal->add_option("--ckpt", ckpt, "checkpoint file")->required();
    sal->add_option("--index", index, "image index")->required();
    sal->add_option("--k", levels, "quantization levels");
    sal->add_option("--r", r_override, "routing iterations (default: checkpoint's)");
    sal->add_option("--out", out_path, "output path prefix")->required();
    data.attach(sal);

    auto* tree = app.add_subcommand("parsetree", "backtracking parse-tree DOT file");
    tree->add_option("--ckpt", ckpt, "checkpoint file")->required();
    tree->add_option("--index", index, "image index")->required();
    tree->add_option("--threshold", threshold, "minimum quantized coupling for an edge");
    tree->add_option("--k", levels, "quantization levels");
    tree->add_option("--r", r_override, "routing iterations (default: checkpoint's)");
    tree->add_option("--out", out_path, "output DOT file")->required();
    data.attach(tree);

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check (micro model)");
    gc->add_option("--seed", gc_seed, "model/input seed");
    gc->add_option("--threshold", gc_threshold, "max relative error allowed");

    auto* dump = app.add_subcommand("dump-couplings", "CSV dump of routing couplings");
    dump->add_option("--ckpt", ckpt, "checkpoint file")->required();
    dump->add_option("--r", r_override, "routing iterations (default: checkpoint's)");
    dump->add_option("--out", out_path, "output CSV file")->required();
    data.attach(dump);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, out_dir);
        if (eval->parsed()) return cmd_eval(ckpt, data, r_override);
        if (rem->parsed()) return cmd_rem(ckpt, data, levels, label_source, r_override, out_dir);
        if (sal->parsed()) return cmd_saliency(ckpt, data, index, levels, r_override, out_path);
        if (tree->parsed()) {
            return cmd_parsetree(ckpt, data, index, threshold, levels, r_override, out_path);
        }
        if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_threshold);
        if (dump->parsed()) return cmd_dump_couplings(ckpt, data, r_override, out_path);
    } catch (const caps::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const caps::UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const caps::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const caps::CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
