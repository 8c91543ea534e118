// Command-line entry point: train, gen-advset, eval, ablate and report over
// a single JSON experiment config, with dotted-path overrides.

#include <CLI11.hpp>
#include <iostream>

#include "lisard/experiment.hpp"

namespace {

using namespace lisard;

struct CommonArgs {
    std::string config_path;
    std::string preset;
    std::vector<std::string> overrides;
    std::int64_t seed = -1;
    bool strict_determinism = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "Path to the experiment config JSON");
    cmd->add_option("--preset", args.preset,
                    "Start from a shipped preset (paper-cifar10-lisard, paper-tinyimagenet, "
                    "desk-toy)");
    cmd->add_option("--set", args.overrides,
                    "Override a scalar config leaf, e.g. --set train.epochs=20")
        ->take_all();
    cmd->add_option("--seed", args.seed, "Override the global seed");
    cmd->add_flag("--strict-determinism", args.strict_determinism,
                  "Single-threaded bit-reproducible mode (wall times recorded as 0)");
}

ExperimentConfig load_config(const CommonArgs& args) {
    json j;
    if (!args.preset.empty()) {
        j = preset_config(args.preset);
        if (!args.config_path.empty()) {
            throw ConfigError("--config and --preset are mutually exclusive");
        }
    } else if (!args.config_path.empty()) {
        std::ifstream is(args.config_path);
        if (!is) throw IoError("cannot open config: " + args.config_path);
        try {
            is >> j;
        } catch (const std::exception& e) {
            throw ConfigError("config is not valid JSON: " + std::string(e.what()));
        }
    } else {
        throw ConfigError("one of --config or --preset is required");
    }
    for (const std::string& kv : args.overrides) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("override must look like key.path=value, got '" + kv + "'");
        }
        apply_override(j, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (args.seed >= 0) j["seed"] = args.seed;
    if (args.strict_determinism) j["train"]["strict_determinism"] = true;
    ExperimentConfig cfg = parse_config(j);
    for (const NamedAttack& na : cfg.attacks) {
        if (na.spec.step_exceeds_budget()) {
            std::cerr << "warning: attack '" << na.name << "' has step_size "
                      << fmt_g(na.spec.step_size, 6) << " > epsilon "
                      << fmt_g(na.spec.epsilon, 6) << "\n";
        }
    }
    return cfg;
}

int cmd_train(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    TrainOutputs out = train_experiment(cfg);
    if (out.started_at_epoch > 1) {
        std::cout << "resumed at epoch " << out.started_at_epoch << "\n";
    }
    std::cout << "trained " << cfg.backbone.name << " (" << train_mode_name(cfg.train.mode)
              << ") for " << out.record.rows.size() << " epochs\n";
    if (!out.record.rows.empty()) {
        const EpochRow& last = out.record.rows.back();
        std::cout << "final train accuracy " << fmt_g(last.train_accuracy, 4) << ", composite loss "
                  << fmt_g(last.composite, 6) << "\n";
    }
    std::cout << "weights: " << out.weights_path.string() << "\n";
    std::cout << "record:  " << (out.out_dir / "records" / "train_record.csv").string() << "\n";
    return 0;
}

int cmd_gen_advset(const CommonArgs& args, const std::string& attack) {
    ExperimentConfig cfg = load_config(args);
    AdvSetOutputs out = gen_advset_experiment(cfg, attack);
    if (out.cache_hit) {
        std::cout << "cache hit: " << out.base_path << ".bin\n";
    } else {
        std::cout << "generated: " << out.base_path << ".bin\n";
    }
    return 0;
}

int cmd_eval(const CommonArgs& args, bool plots) {
    ExperimentConfig cfg = load_config(args);
    EvalOutputs out = eval_experiment(cfg, plots);
    std::cout << render_table(out.report);
    std::cout << "\nreport: " << out.report_json.string() << "\n";
    for (const auto& p : out.plots) std::cout << "plot:   " << p.string() << "\n";
    return 0;
}

int cmd_ablate(const CommonArgs& args, const std::string& suite, long seeds) {
    ExperimentConfig cfg = load_config(args);
    AblateOutputs out = ablate_experiment(cfg, suite, seeds);
    std::ifstream is(out.report_txt);
    std::cout << is.rdbuf();
    std::cout << "\nreport: " << out.report_json.string() << "\n";
    return 0;
}

int cmd_report(const CommonArgs& args, const std::string& file) {
    fs::path report_path;
    if (!file.empty()) {
        report_path = file;
    } else {
        ExperimentConfig cfg = load_config(args);
        report_path = experiment_paths(cfg).eval_report_json();
    }
    std::ifstream is(report_path);
    if (!is) throw IoError("cannot open report: " + report_path.string());
    json j;
    is >> j;
    EvalReport rep;
    from_json(j, rep);
    std::cout << render_table(rep);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Similarity-regularized robust training and gray-box evaluation"};
    app.require_subcommand(1);

    CommonArgs train_args, gen_args, eval_args, ablate_args, report_args;
    std::string gen_attack;
    bool eval_plots = false;
    std::string ablate_suite;
    long ablate_seeds = 1;
    std::string report_file;

    CLI::App* train = app.add_subcommand("train", "Train a model from a config");
    add_common(train, train_args);

    CLI::App* gen = app.add_subcommand("gen-advset", "Generate one evaluation attack set");
    add_common(gen, gen_args);
    gen->add_option("--attack", gen_attack, "Attack name from the config (fgsm, pgd, aa, ...)")
        ->required();

    CLI::App* eval = app.add_subcommand("eval", "Run the gray-box evaluation protocol");
    add_common(eval, eval_args);
    eval->add_flag("--plots", eval_plots, "Emit clean-vs-attacked statistic histograms (SVG)");

    CLI::App* ablate = app.add_subcommand("ablate", "Run an ablation suite");
    add_common(ablate, ablate_args);
    ablate->add_option("--suite", ablate_suite, "perturb-mode, loss-terms or components")
        ->required();
    ablate->add_option("--seeds", ablate_seeds, "Number of seeds per grid row");

    CLI::App* report = app.add_subcommand("report", "Render a stored evaluation report");
    add_common(report, report_args);
    report->add_option("--file", report_file, "Report JSON (defaults to the config's output dir)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(train_args);
        if (gen->parsed()) return cmd_gen_advset(gen_args, gen_attack);
        if (eval->parsed()) return cmd_eval(eval_args, eval_plots);
        if (ablate->parsed()) return cmd_ablate(ablate_args, ablate_suite, ablate_seeds);
        if (report->parsed()) return cmd_report(report_args, report_file);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
