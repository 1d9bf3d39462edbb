// cpslab: generate toy data, train one method, evaluate a checkpoint, run a
// sweep, or dump sample images.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "cpslab/cpslab.hpp"

namespace fs = std::filesystem;
using namespace cpslab;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Options shared by every subcommand; unset values leave the config alone.
struct CommonFlags {
    std::string config;
    std::optional<std::string> method;
    std::optional<std::string> ratio;
    std::optional<double> lambda;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    std::string out;
    bool cutmix = false;
};

void add_common(CLI::App* cmd, CommonFlags& f, const std::string& out_help) {
    cmd->add_option("--config", f.config, "flat key = value config file");
    cmd->add_option("--method", f.method, "training method");
    cmd->add_option("--ratio", f.ratio, "labeled fraction, e.g. 1/8 or 0.125");
    cmd->add_option("--lambda", f.lambda, "consistency weight");
    cmd->add_option("--seed", f.seed, "experiment seed (partition, init, augmentation)");
    cmd->add_option("--epochs", f.epochs, "training epochs");
    if (!out_help.empty()) cmd->add_option("--out", f.out, out_help);
    cmd->add_flag("--cutmix", f.cutmix, "use the CutMix variant of cps/sps");
}

// Usage-level validation of values before any work starts.
template <typename F>
auto as_usage(F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    } catch (const ArgumentError& e) {
        throw UsageError(e.what());
    }
}

MethodKind with_cutmix(MethodKind m) {
    if (m == MethodKind::CPS) return MethodKind::CPS_CutMix;
    if (m == MethodKind::SPS) return MethodKind::SPS_CutMix;
    if (uses_cutmix(m)) return m;
    throw ConfigError("--cutmix applies only to cps and sps");
}

void apply_flags(TrainConfig& cfg, const CommonFlags& f) {
    if (f.method) cfg.method = parse_method(*f.method);
    if (f.ratio) cfg.ratio = parse_ratio(*f.ratio);
    if (f.lambda) cfg.lambda = *f.lambda;
    if (f.seed) apply_seed(cfg, *f.seed);
    if (f.epochs) cfg.epochs = *f.epochs;
    if (f.cutmix) cfg.method = with_cutmix(cfg.method);
}

TrainConfig load_train_config(const CommonFlags& f) {
    return as_usage([&] {
        TrainConfig cfg;
        if (!f.config.empty())
            for (const auto& [k, v] : read_settings(f.config)) apply_setting(cfg, k, v);
        apply_flags(cfg, f);
        cfg.validate();
        return cfg;
    });
}

ExperimentSpec load_experiment(const CommonFlags& f) {
    return as_usage([&] {
        ExperimentSpec spec;
        if (!f.config.empty())
            for (const auto& [k, v] : read_settings(f.config)) apply_experiment_setting(spec, k, v);
        if (f.method) spec.methods = {parse_method(*f.method)};
        if (f.cutmix)
            for (auto& m : spec.methods) m = with_cutmix(m);
        if (f.ratio) {
            parse_ratio(*f.ratio);
            spec.ratios = {*f.ratio};
        }
        if (f.lambda) spec.base.lambda = *f.lambda;
        if (f.seed) spec.seeds = {*f.seed};
        if (f.epochs) spec.base.epochs = *f.epochs;
        if (!f.out.empty()) spec.out_dir = f.out;
        spec.validate();
        return spec;
    });
}

int cmd_gen_data(const CommonFlags& f) {
    const TrainConfig cfg = load_train_config(f);
    const std::string path = f.out.empty() ? "toy_data.bin" : f.out;
    const Dataset d = generate_toy_dataset(cfg.train_size, cfg.height, cfg.width, cfg.num_classes, cfg.data_seed, cfg.data);
    save_dataset(d, path);
    std::cout << "wrote " << d.size() << " samples (" << cfg.height << "x" << cfg.width << ", K=" << cfg.num_classes
              << ") to " << path << '\n';
    return 0;
}

int cmd_train(const CommonFlags& f) {
    const TrainConfig cfg = load_train_config(f);
    const fs::path dir = f.out.empty() ? fs::path("run_" + method_name(cfg.method)) : fs::path(f.out);
    fs::create_directories(dir);
    {
        std::ofstream os(dir / "config.txt");
        write_config(os, cfg);
    }
    std::cout << "training " << method_name(cfg.method) << " (ratio " << cfg.ratio << ", lambda " << cfg.lambda
              << ", " << cfg.epochs << " epochs)\n";
    const RunResult r = train(cfg);
    for (const auto& note : r.notes) std::cout << "note: " << note << '\n';
    for (const auto& rec : r.records)
        std::cout << "epoch " << rec.epoch << "  loss " << fmt("%.4f", rec.losses.total) << "  mIoU "
                  << fmt("%.4f", rec.miou) << (rec.overlap ? "  overlap " + fmt("%.4f", *rec.overlap) : "") << '\n';
    {
        std::ofstream os(dir / "metrics.csv");
        write_curve_csv(os, r.records);
    }
    save_checkpoint(r.final_net, (dir / "checkpoint.bin").string());
    if (r.second_net) save_checkpoint(*r.second_net, (dir / "checkpoint_second.bin").string());
    std::cout << "final mIoU " << fmt("%.4f", r.final_miou()) << " in " << fmt("%.1f", r.wall_seconds) << " s; wrote "
              << dir.string() << '\n';
    return 0;
}

int cmd_eval(const CommonFlags& f, const std::string& checkpoint) {
    const TrainConfig cfg = load_train_config(f);
    const SegNet net = load_checkpoint(checkpoint);
    if (net.config().num_classes != cfg.num_classes)
        throw ConfigError("checkpoint has " + std::to_string(net.config().num_classes) + " classes, config has " +
                          std::to_string(cfg.num_classes));
    const Dataset val = generate_toy_dataset(cfg.val_size, cfg.height, cfg.width, cfg.num_classes,
                                             derive_seed(cfg.data_seed, "validation"), cfg.data);
    const EvalResult ev = evaluate(net, val);
    const MiouResult m = miou(ev.confusion);
    for (std::size_t k = 0; k < m.per_class.size(); ++k)
        std::cout << "class " << k << "  IoU " << (m.per_class[k] ? fmt("%.4f", *m.per_class[k]) : "absent") << '\n';
    std::cout << "mIoU " << fmt("%.4f", m.mean) << '\n';
    return 0;
}

int cmd_sweep(const CommonFlags& f) {
    const ExperimentSpec spec = load_experiment(f);
    const ExperimentReport rep = run_experiments(spec, worker_threads(), &std::cout);
    std::ifstream table(fs::path(spec.out_dir) / "table.md");
    std::cout << '\n' << table.rdbuf();
    if (rep.failures()) {
        std::cerr << rep.failures() << " run(s) failed\n";
        return 1;
    }
    return 0;
}

int cmd_export(const CommonFlags& f, std::size_t count) {
    const TrainConfig cfg = load_train_config(f);
    const fs::path dir = f.out.empty() ? fs::path("samples") : fs::path(f.out);
    fs::create_directories(dir);
    const Dataset d = generate_toy_dataset(std::min(count, cfg.train_size), cfg.height, cfg.width, cfg.num_classes,
                                           cfg.data_seed, cfg.data);
    for (const auto& s : d.samples) {
        const std::string stem = "sample_" + std::to_string(s.id);
        write_ppm(s.image, (dir / (stem + ".ppm")).string());
        write_label_pgm(s.labels, cfg.num_classes, (dir / (stem + "_labels.pgm")).string());
    }
    std::cout << "wrote " << d.size() << " image/label pairs to " << dir.string() << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Semi-supervised segmentation lab: cross pseudo supervision and baselines on toy data"};
    app.require_subcommand(1);

    CommonFlags gen_f, train_f, eval_f, sweep_f, export_f;
    std::string checkpoint;
    std::size_t count = 8;

    auto* gen = app.add_subcommand("gen-data", "generate the toy training set and write its cache file");
    add_common(gen, gen_f, "output cache file");
    auto* tr = app.add_subcommand("train", "train one method and write a run directory");
    add_common(tr, train_f, "run directory");
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
    add_common(ev, eval_f, "");
    ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    auto* sw = app.add_subcommand("sweep", "run every (method, ratio, seed) and write tables and plots");
    add_common(sw, sweep_f, "output directory");
    auto* ex = app.add_subcommand("export-samples", "write sample images and label maps as PPM/PGM");
    add_common(ex, export_f, "output directory");
    ex->add_option("--count", count, "number of samples");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*gen) return cmd_gen_data(gen_f);
        if (*tr) return cmd_train(train_f);
        if (*ev) return cmd_eval(eval_f, checkpoint);
        if (*sw) return cmd_sweep(sweep_f);
        if (*ex) return cmd_export(export_f, count);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\nRun with --help for usage.\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
