#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "attnkit/complexity.hpp"
#include "attnkit/gradcam.hpp"
#include "attnkit/gradcheck.hpp"
#include "attnkit/serialize.hpp"
#include "attnkit/train.hpp"

using namespace attnkit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitDataFormat = 2;
constexpr int kExitVerification = 3;

struct GlobalOpts {
    std::string config;
    std::string out = ".";
    std::uint64_t seed = 0;
    bool seed_set = false;
};

TrainConfig load_train_config(const GlobalOpts& g) {
    if (g.config.empty()) throw ConfigError("--config <json> is required");
    TrainConfig cfg = train_config_from_json_file(g.config);
    if (g.seed_set) cfg.seed = g.seed;
    return cfg;
}

void print_recipe_header(const TrainConfig& cfg) {
    std::printf("# arch: %s blocks, attention=%s\n", to_string(cfg.arch.block_type).c_str(),
                to_string(cfg.arch.attention.kind).c_str());
    std::printf("# optimizer: sgd-momentum lr=%g momentum=%g weight_decay=%g\n",
                cfg.optimizer.learning_rate, cfg.optimizer.momentum, cfg.optimizer.weight_decay);
    std::printf("# schedule: x0.1 at epochs %d and %d of %d; batch_size=%d seed=%llu\n",
                cfg.epochs / 2, cfg.epochs * 3 / 4, cfg.epochs, cfg.batch_size,
                static_cast<unsigned long long>(cfg.seed));
}

int cmd_train(const GlobalOpts& g, bool resume, int stop_after) {
    TrainConfig cfg = load_train_config(g);
    print_recipe_header(cfg);
    TrainResult res = train_model(cfg, g.out, resume, stop_after);
    std::fputs(res.metrics_csv.c_str(), stdout);
    if (!res.checkpoint_path.empty()) {
        std::printf("# checkpoint: %s\n", res.checkpoint_path.c_str());
    }
    std::printf("# metrics: %s/metrics.csv\n", g.out.c_str());
    return kExitOk;
}

int cmd_eval(const GlobalOpts& g, const std::string& checkpoint) {
    TrainConfig cfg = load_train_config(g);
    DatasetHandle train_data, eval_data;
    load_datasets(cfg, train_data, eval_data);
    Network net = build(cfg.arch, cfg.seed);
    SgdOptimizer opt(net, cfg.optimizer);
    if (!checkpoint.empty()) {
        load_checkpoint(checkpoint, net, opt);
    }
    const Scalar acc = evaluate(net, eval_data, cfg.batch_size);
    std::printf("eval_acc,%.6f\n", acc);
    return kExitOk;
}

int cmd_ablate(const GlobalOpts& g) {
    TrainConfig cfg = load_train_config(g);
    print_recipe_header(cfg);
    std::vector<AblationRow> rows = ablate(cfg, g.out);
    std::fputs(ablation_table(rows).c_str(), stdout);
    std::printf("# table: %s/ablation.csv\n", g.out.c_str());
    return kExitOk;
}

int cmd_gradcheck(const GlobalOpts& g, const std::string& scope_name, int instances) {
    const CheckScope scope = check_scope_from_string(scope_name);
    const std::uint64_t seed = g.seed_set ? g.seed : 20240901ULL;
    std::vector<CheckResult> results = run_gradcheck(scope, instances, seed);
    std::fputs(gradcheck_report(results).c_str(), stdout);
    if (!all_passed(results)) {
        std::fputs("gradcheck: FAILED\n", stdout);
        return kExitVerification;
    }
    std::fputs("gradcheck: all passed\n", stdout);
    return kExitOk;
}

int cmd_report(const GlobalOpts& g, const std::string& arch_path, bool formula_table) {
    if (formula_table) {
        std::fputs(resnet50_formula_table().c_str(), stdout);
        if (arch_path.empty()) return kExitOk;
    }
    if (arch_path.empty()) throw ConfigError("report: --arch <archspec.json> is required");
    ArchSpec spec = arch_from_json_file(arch_path);
    const std::uint64_t seed = g.seed_set ? g.seed : 1ULL;
    Network net = build(spec, seed);
    ComplexityReport rep = analyze(net, spec.in_channels, spec.in_height, spec.in_width);
    std::fputs(report_text(rep).c_str(), stdout);
    if (!g.out.empty()) {
        std::filesystem::create_directories(g.out);
        std::ofstream os(g.out + "/report.json", std::ios::binary);
        if (!os) throw IoError("report: cannot write report.json under '" + g.out + "'");
        os << report_json(rep) << "\n";
        std::printf("# json: %s/report.json\n", g.out.c_str());
    }
    return kExitOk;
}

int cmd_gradcam(const GlobalOpts& g, const std::string& checkpoint, std::string layer,
                int class_index, int sample_index) {
    TrainConfig cfg = load_train_config(g);
    DatasetHandle train_data, eval_data;
    load_datasets(cfg, train_data, eval_data);
    if (eval_data.samples.empty()) throw ConfigError("gradcam: eval split is empty");
    if (sample_index < 0 || sample_index >= static_cast<int>(eval_data.samples.size())) {
        throw ConfigError("gradcam: sample index out of range");
    }

    Network net = build(cfg.arch, cfg.seed);
    SgdOptimizer opt(net, cfg.optimizer);
    if (!checkpoint.empty()) load_checkpoint(checkpoint, net, opt);

    const int indices[1] = {sample_index};
    Tensor4 x = make_batch(eval_data, indices);
    if (layer.empty()) layer = net.default_cam_layer();

    if (class_index < 0) {
        Tensor4 logits = net.forward(x, Mode::eval);
        class_index = 0;
        for (int c = 1; c < cfg.arch.num_classes; ++c) {
            if (logits.at(0, c, 0, 0) > logits.at(0, class_index, 0, 0)) class_index = c;
        }
    }

    Heatmap h = gradcam(net, x, class_index, layer);
    std::filesystem::create_directories(g.out);
    const std::string pgm = g.out + "/heatmap.pgm";
    write_pgm(h, pgm);

    // Grayscale view of the raw (unnormalized) input for the overlay.
    const auto& img = eval_data.samples[static_cast<std::size_t>(sample_index)].image;
    const int plane = eval_data.height * eval_data.width;
    std::vector<Scalar> gray(static_cast<std::size_t>(plane), 0.0);
    for (int c = 0; c < eval_data.channels; ++c)
        for (int i = 0; i < plane; ++i)
            gray[static_cast<std::size_t>(i)] +=
                img[static_cast<std::size_t>(c * plane + i)] / eval_data.channels;
    const std::string ppm = g.out + "/overlay.ppm";
    write_ppm_overlay(h, gray, ppm);

    std::printf("gradcam: layer=%s class=%d sample=%d label=%d\n", layer.c_str(), class_index,
                sample_index, eval_data.samples[static_cast<std::size_t>(sample_index)].label);
    std::printf("wrote %s and %s\n", pgm.c_str(), ppm.c_str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"convolutional attention modules: training, ablation, complexity accounting, "
                 "gradient verification and class-activation maps"};
    app.require_subcommand(1);
    // Let --config/--out/--seed appear after the subcommand as well.
    app.fallthrough();

    GlobalOpts g;
    app.add_option("--config", g.config, "train/eval configuration JSON");
    app.add_option("--out", g.out, "output directory");
    auto* seed_opt = app.add_option("--seed", g.seed, "seed override");

    bool resume = false;
    int stop_after = -1;
    auto* train_cmd = app.add_subcommand("train", "train a configured network");
    train_cmd->fallthrough();
    train_cmd->add_flag("--resume", resume, "continue from the configured checkpoint");
    train_cmd->add_option("--stop-after", stop_after,
                          "pause after this many epochs (resume later)");

    std::string checkpoint;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the eval split");
    eval_cmd->fallthrough();
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file");

    auto* ablate_cmd = app.add_subcommand("ablate", "train the four branch-ablation variants");
    ablate_cmd->fallthrough();

    std::string scope = "all";
    int instances = 20;
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    gc_cmd->fallthrough();
    gc_cmd->add_option("--scope", scope, "ops | attention | end2end | all");
    gc_cmd->add_option("--instances", instances, "random instances per operation");

    std::string arch_path;
    bool formula_table = false;
    auto* report_cmd = app.add_subcommand("report", "parameter and MAC accounting");
    report_cmd->fallthrough();
    report_cmd->add_option("--arch", arch_path, "ArchSpec JSON file");
    report_cmd->add_flag("--mechanisms", formula_table,
                         "also print the five-mechanism formula table");

    std::string layer;
    int class_index = -1;
    int sample_index = 0;
    std::string cam_checkpoint;
    auto* cam_cmd = app.add_subcommand("gradcam", "emit a class-activation heatmap");
    cam_cmd->fallthrough();
    cam_cmd->add_option("--checkpoint", cam_checkpoint, "checkpoint file");
    cam_cmd->add_option("--layer", layer, "activation name (default: last pre-head features)");
    cam_cmd->add_option("--class", class_index, "class index (default: predicted top-1)");
    cam_cmd->add_option("--sample", sample_index, "eval-split sample index");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }
    g.seed_set = seed_opt->count() > 0;

    try {
        if (train_cmd->parsed()) return cmd_train(g, resume, stop_after);
        if (eval_cmd->parsed()) return cmd_eval(g, checkpoint);
        if (ablate_cmd->parsed()) return cmd_ablate(g);
        if (gc_cmd->parsed()) return cmd_gradcheck(g, scope, instances);
        if (report_cmd->parsed()) return cmd_report(g, arch_path, formula_table);
        if (cam_cmd->parsed()) return cmd_gradcam(g, cam_checkpoint, layer, class_index,
                                                  sample_index);
    } catch (const FormatError& e) {
        std::fprintf(stderr, "data format error: %s\n", e.what());
        return kExitDataFormat;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfig;
    }
    return kExitConfig;
}
