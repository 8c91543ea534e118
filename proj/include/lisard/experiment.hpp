#pragma once
// Experiment orchestration on top of the trainer and eval kit: output-tree
// layout, config snapshots, checkpoint/resume, attack-set generation and the
// ablation suites. The CLI is a thin shell over these functions.

#include "lisard/config.hpp"
#include "lisard/plot.hpp"

namespace lisard {

// Output tree under the experiment directory.
struct ExperimentPaths {
    fs::path root;
    fs::path weights() const { return root / "weights"; }
    fs::path advsets() const { return root / "advsets"; }
    fs::path reports() const { return root / "reports"; }
    fs::path records() const { return root / "records"; }
    fs::path snapshot() const { return root / "config.snapshot.json"; }
    fs::path final_weights() const { return weights() / "final.wt"; }
    fs::path checkpoint_weights() const { return weights() / "checkpoint.wt"; }
    fs::path checkpoint_opt() const { return weights() / "checkpoint.opt.bin"; }
    fs::path checkpoint_meta() const { return weights() / "checkpoint.meta.json"; }
    fs::path record_csv() const { return records() / "train_record.csv"; }
    fs::path eval_report_json() const { return reports() / "eval_report.json"; }
    fs::path eval_report_txt() const { return reports() / "eval_report.txt"; }
};

inline ExperimentPaths experiment_paths(const ExperimentConfig& cfg) {
    ExperimentPaths p;
    p.root = resolve_output_dir(cfg);
    return p;
}

inline void write_snapshot(const ExperimentConfig& cfg, const ExperimentPaths& paths) {
    fs::create_directories(paths.root);
    std::ofstream os(paths.snapshot(), std::ios::trunc);
    if (!os) throw IoError("cannot write config snapshot: " + paths.snapshot().string());
    os << config_to_json(cfg).dump(2) << '\n';
}

inline void write_text_file(const fs::path& file, const std::string& text) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream os(file, std::ios::trunc);
    if (!os) throw IoError("cannot write " + file.string());
    os << text;
}

// ---------------------------------------------------------------------------
// Training with persistence and resume

struct TrainOutputs {
    fs::path out_dir;
    fs::path weights_path;
    TrainRecord record;
    long started_at_epoch = 1;
    bool finished = false;
};

namespace detail {

// Raised by the checkpoint callback to model an interrupted session.
struct SessionStop {};

inline void save_checkpoint(const ExperimentPaths& paths, DifferentiableModel& model,
                            SgdOptimizer& opt, const TrainRecord& record, long epoch,
                            const std::string& cfg_hash) {
    save_weights(model, paths.checkpoint_weights().string(), cfg_hash);
    {
        std::ofstream os(paths.checkpoint_opt(), std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot write optimizer state: " + paths.checkpoint_opt().string());
        NamedState st = opt.state();
        write_tensor_map(os, st);
    }
    json meta;
    meta["epoch"] = epoch;
    meta["config_hash"] = cfg_hash;
    write_text_file(paths.checkpoint_meta(), meta.dump(2) + "\n");
    write_text_file(paths.record_csv(), record.to_csv());
}

}  // namespace detail

// Runs (or resumes) the configured training into the experiment directory.
// stop_after_epoch > 0 ends the session after that epoch's checkpoint, the
// same state an interrupted run leaves behind.
inline TrainOutputs train_experiment(const ExperimentConfig& cfg, long stop_after_epoch = 0) {
    ExperimentPaths paths = experiment_paths(cfg);
    fs::create_directories(paths.weights());
    fs::create_directories(paths.records());
    write_snapshot(cfg, paths);

    DatasetHandle train_ds = load_dataset(cfg.dataset, Split::train, cfg.seed);
    require(train_ds.num_classes == cfg.backbone.num_classes,
            "dataset class count does not match backbone");

    auto model = build(cfg.backbone);
    const std::string cfg_hash = train_config_hash(cfg.train);
    SgdOptimizer opt(cfg.train.lr, cfg.train.momentum, cfg.train.weight_decay);
    TrainRecord record;
    long start_epoch = 1;

    if (fs::exists(paths.checkpoint_meta())) {
        json meta;
        std::ifstream ms(paths.checkpoint_meta());
        ms >> meta;
        if (meta.at("config_hash").get<std::string>() != cfg_hash) {
            throw ConfigError("checkpoint in " + paths.root.string() +
                              " was written by a different training config; move it aside or "
                              "change output_dir");
        }
        long done = meta.at("epoch").get<long>();
        if (done >= cfg.train.epochs) {
            // Interruption can land exactly on the last epoch's checkpoint.
            if (!fs::exists(paths.final_weights())) {
                auto finished_model = load_weights(paths.checkpoint_weights().string(),
                                                   &cfg.backbone);
                save_weights(*finished_model, paths.final_weights().string(), cfg_hash);
            }
            TrainOutputs out;
            out.out_dir = paths.root;
            out.weights_path = paths.final_weights();
            std::ifstream rs(paths.record_csv());
            out.record = TrainRecord::from_csv(rs);
            out.started_at_epoch = done + 1;
            out.finished = true;
            return out;
        }
        model = load_weights(paths.checkpoint_weights().string(), &cfg.backbone);
        {
            std::ifstream is(paths.checkpoint_opt(), std::ios::binary);
            if (!is) throw IoError("missing optimizer state: " + paths.checkpoint_opt().string());
            auto tensors = read_tensor_map(is);
            opt.restore(tensors, model->params().size());
        }
        std::ifstream rs(paths.record_csv());
        record = TrainRecord::from_csv(rs);
        require(static_cast<long>(record.rows.size()) == done,
                "train record rows do not match checkpoint epoch");
        start_epoch = done + 1;
    }

    TrainCallbacks cb;
    cb.on_epoch_end = [&](long epoch, DifferentiableModel& m, SgdOptimizer& o,
                          const TrainRecord& rec) {
        if (epoch % cfg.train.checkpoint_every == 0 || epoch == cfg.train.epochs ||
            epoch == stop_after_epoch) {
            detail::save_checkpoint(paths, m, o, rec, epoch, cfg_hash);
        }
        if (stop_after_epoch > 0 && epoch >= stop_after_epoch) throw detail::SessionStop{};
    };

    TrainOutputs out;
    out.out_dir = paths.root;
    out.started_at_epoch = start_epoch;
    try {
        out.record = train_model(*model, train_ds, cfg.train, cb, start_epoch, std::move(record),
                                 &opt);
    } catch (const detail::SessionStop&) {
        std::ifstream rs(paths.record_csv());
        out.record = TrainRecord::from_csv(rs);
        out.weights_path = paths.checkpoint_weights();
        out.finished = false;
        return out;
    }
    save_weights(*model, paths.final_weights().string(), cfg_hash);
    write_text_file(paths.record_csv(), out.record.to_csv());
    out.weights_path = paths.final_weights();
    out.finished = true;
    return out;
}

// ---------------------------------------------------------------------------
// Attack-set generation

inline const NamedAttack& find_attack(const ExperimentConfig& cfg, const std::string& query) {
    require(!cfg.attacks.empty(), "config declares no attacks");
    auto lower = [](std::string s) {
        std::transform(s.begin(), s.end(), s.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        return s;
    };
    const std::string q = lower(query);
    for (const NamedAttack& na : cfg.attacks) {
        if (lower(na.name) == q) return na;
    }
    // Short aliases: fgsm / pgd / aa.
    for (const NamedAttack& na : cfg.attacks) {
        if (q == "aa" && lower(na.name).rfind("aa-substitute", 0) == 0) return na;
        if (q == "fgsm" && na.spec.kind == AttackKind::fgsm) return na;
        if (q == "pgd" && na.spec.kind == AttackKind::pgd &&
            lower(na.name).rfind("aa-substitute", 0) != 0) {
            return na;
        }
    }
    std::string known;
    for (const NamedAttack& na : cfg.attacks) known += (known.empty() ? "" : ", ") + na.name;
    throw ConfigError("no attack named '" + query + "' in config (have: " + known + ")");
}

struct AdvSetOutputs {
    std::string base_path;
    bool cache_hit = false;
};

inline AdvSetOutputs gen_advset_experiment(const ExperimentConfig& cfg,
                                           const std::string& attack_name) {
    ExperimentPaths paths = experiment_paths(cfg);
    const NamedAttack& na = find_attack(cfg, attack_name);
    if (cfg.graybox.surrogate_weights.empty() || !fs::exists(cfg.graybox.surrogate_weights)) {
        throw IoError("missing surrogate weights: '" + cfg.graybox.surrogate_weights + "'");
    }
    auto surrogate = load_weights(cfg.graybox.surrogate_weights);
    surrogate->set_mode(Mode::inference);
    DatasetHandle test_ds = load_dataset(cfg.dataset, Split::test, cfg.seed);

    const std::string key = advset_key(model_state_sha256(*surrogate), test_ds, na.spec);
    AdvSetOutputs out;
    out.base_path = (paths.advsets() / key).string();
    if (fs::exists(out.base_path + ".json")) {
        load_advset(out.base_path);  // verifies content hash
        out.cache_hit = true;
        return out;
    }
    generate_advset(*surrogate, test_ds, na.spec, out.base_path);
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOutputs {
    EvalReport report;
    fs::path report_json;
    fs::path report_txt;
    std::vector<fs::path> plots;
};

inline EvalOutputs eval_experiment(const ExperimentConfig& cfg, bool with_plots = false) {
    ExperimentPaths paths = experiment_paths(cfg);
    if (cfg.graybox.surrogate_weights.empty() || !fs::exists(cfg.graybox.surrogate_weights)) {
        throw IoError("missing surrogate weights: '" + cfg.graybox.surrogate_weights + "'");
    }
    require(!cfg.graybox.target_weights.empty(), "graybox.target_weights is empty");
    require(!cfg.attacks.empty(), "config declares no attacks");

    // Weight files are usually <experiment>/weights/final.wt; label rows by
    // the experiment directory in that case.
    auto display_id = [](const fs::path& p) {
        std::string stem = p.stem().string();
        if ((stem == "final" || stem == "checkpoint") && p.has_parent_path() &&
            p.parent_path().has_parent_path()) {
            return p.parent_path().parent_path().filename().string();
        }
        return stem;
    };

    auto surrogate = load_weights(cfg.graybox.surrogate_weights);
    std::vector<std::unique_ptr<DifferentiableModel>> owned;
    GrayBoxModels models;
    models.surrogate = surrogate.get();
    models.surrogate_id = display_id(cfg.graybox.surrogate_weights);
    for (const std::string& path : cfg.graybox.target_weights) {
        if (!fs::exists(path)) throw IoError("missing target weights: '" + path + "'");
        owned.push_back(load_weights(path));
        models.targets.push_back(owned.back().get());
        models.target_ids.push_back(display_id(path));
        models.target_hashes.push_back(model_state_sha256(*owned.back()));
        require(owned.back()->spec().name == surrogate->spec().name,
                "gray-box premise violated: target '" + path +
                    "' has a different architecture than the surrogate");
    }
    DatasetHandle test_ds = load_dataset(cfg.dataset, Split::test, cfg.seed);

    GrayBoxOptions opt;
    opt.advset_dir = paths.advsets().string();
    opt.allow_self_target = cfg.graybox.allow_self_target;
    opt.collect_stat_samples = with_plots;
    EvalOutputs out;
    out.report = run_graybox(models, test_ds, cfg.attacks, opt);

    json j;
    to_json(j, out.report);
    out.report_json = paths.eval_report_json();
    out.report_txt = paths.eval_report_txt();
    write_text_file(out.report_json, j.dump(2) + "\n");
    write_text_file(out.report_txt, render_table(out.report));

    if (with_plots) {
        for (const StatSamples& s : out.report.stat_samples) {
            const DprimeRow& d = out.report.lookup_dprime(s.target, s.attack);
            std::string fname = s.target + "_" + s.attack + ".svg";
            for (char& c : fname) {
                if (c == ' ' || c == '(' || c == ')' || c == '/') c = '-';
            }
            fs::path file = paths.reports() / "plots" / fname;
            write_histogram_svg(file, s.clean_stat, s.adv_stat, "clean", s.attack,
                                s.target + " embedding statistic", d.dprime);
            out.plots.push_back(file);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ablation suites

struct AblateRowResult {
    std::string row;
    long seed_index = 0;
    double clean = 0.0;
    std::map<std::string, double> attack_accuracy;
    double train_wall_seconds = 0.0;
};

struct AblateOutputs {
    std::string suite;
    std::vector<AblateRowResult> results;
    fs::path report_json;
    fs::path report_txt;
};

namespace detail {

struct AblateVariant {
    std::string row;
    TrainConfig train;
};

inline std::vector<AblateVariant> ablate_grid(const std::string& suite, const TrainConfig& base) {
    std::vector<AblateVariant> grid;
    if (suite == "perturb-mode") {
        for (PerturbMode pm : {PerturbMode::random, PerturbMode::fgsm, PerturbMode::pgd}) {
            AblateVariant v{perturb_mode_name(pm), base};
            v.train.perturb_mode = pm;
            grid.push_back(std::move(v));
        }
    } else if (suite == "loss-terms") {
        const std::pair<bool, bool> combos[] = {{true, false}, {false, true}, {true, true}};
        const char* names[] = {"L_C only", "L_R only", "L_C + L_R"};
        for (int i = 0; i < 3; ++i) {
            AblateVariant v{names[i], base};
            v.train.include_lc = combos[i].first;
            v.train.include_lr = combos[i].second;
            grid.push_back(std::move(v));
        }
    } else if (suite == "components") {
        // wo/ alpha: the ramp is disabled (alpha fixed at alpha0);
        // wo/ tau: no temperature (tau = 1).
        struct Combo {
            const char* name;
            bool with_alpha, with_tau;
        };
        const Combo combos[] = {{"wo/ alpha and wo/ tau", false, false},
                                {"w/ alpha", true, false},
                                {"w/ tau", false, true},
                                {"w/ alpha and w/ tau", true, true}};
        for (const Combo& c : combos) {
            AblateVariant v{c.name, base};
            if (!c.with_alpha) v.train.weights.delta = 0.0;
            if (!c.with_tau) v.train.weights.tau = 1.0;
            grid.push_back(std::move(v));
        }
    } else {
        throw ConfigError("unknown ablation suite '" + suite +
                          "' (known: perturb-mode, loss-terms, components)");
    }
    return grid;
}

}  // namespace detail

// Runs the suite's config grid: per seed, a shared standard-trained
// surrogate generates the evaluation attack sets, then every variant is
// trained and scored on them. Emits a combined table with a wall-time
// column plus a JSON with the per-seed rows.
inline AblateOutputs ablate_experiment(const ExperimentConfig& cfg, const std::string& suite,
                                       long seeds = 1) {
    require(seeds >= 1, "ablate: seeds must be >= 1");
    require(cfg.train.mode == TrainMode::lisard, "ablate: base config must be lisard mode");
    require(!cfg.attacks.empty(), "ablate: config declares no attacks");
    ExperimentPaths paths = experiment_paths(cfg);
    fs::create_directories(paths.advsets());
    write_snapshot(cfg, paths);

    std::vector<detail::AblateVariant> grid = detail::ablate_grid(suite, cfg.train);
    DatasetHandle train_ds = load_dataset(cfg.dataset, Split::train, cfg.seed);
    DatasetHandle test_ds = load_dataset(cfg.dataset, Split::test, cfg.seed);

    AblateOutputs out;
    out.suite = suite;
    for (long s = 0; s < seeds; ++s) {
        const std::uint64_t seed_base = mix_seed(cfg.seed, 0xab1a7eULL, static_cast<std::uint64_t>(s));

        // Independently seeded standard surrogate, shared by all rows.
        BackboneSpec surr_spec = cfg.backbone;
        surr_spec.init_seed = mix_seed(seed_base, 0x5a11ULL);
        auto surrogate = build(surr_spec);
        TrainConfig surr_cfg = cfg.train;
        surr_cfg.mode = TrainMode::standard;
        surr_cfg.seed = mix_seed(seed_base, 0x5a12ULL);
        train_standard(*surrogate, train_ds, surr_cfg);
        surrogate->set_mode(Mode::inference);

        for (const detail::AblateVariant& variant : grid) {
            BackboneSpec tgt_spec = cfg.backbone;
            tgt_spec.init_seed = mix_seed(seed_base, 0x7a19ULL);
            auto target = build(tgt_spec);
            TrainConfig tcfg = variant.train;
            tcfg.seed = mix_seed(seed_base, 0x7a20ULL);
            auto t0 = std::chrono::steady_clock::now();
            train_lisard(*target, train_ds, tcfg);
            auto t1 = std::chrono::steady_clock::now();

            GrayBoxModels models;
            models.surrogate = surrogate.get();
            models.surrogate_id = "surrogate";
            models.targets = {target.get()};
            models.target_ids = {variant.row};
            models.target_hashes = {model_state_sha256(*target)};
            GrayBoxOptions opt;
            opt.advset_dir = paths.advsets().string();
            opt.compute_dprime = false;
            EvalReport rep = run_graybox(models, test_ds, cfg.attacks, opt);

            AblateRowResult row;
            row.row = variant.row;
            row.seed_index = s;
            row.clean = rep.lookup(variant.row, "clean");
            for (const std::string& a : rep.attack_names) {
                row.attack_accuracy[a] = rep.lookup(variant.row, a);
            }
            row.train_wall_seconds = std::chrono::duration<double>(t1 - t0).count();
            out.results.push_back(std::move(row));
        }
    }

    json j;
    j["suite"] = suite;
    j["seeds"] = seeds;
    j["rows"] = json::array();
    for (const AblateRowResult& r : out.results) {
        json row;
        row["row"] = r.row;
        row["seed_index"] = r.seed_index;
        row["clean"] = r.clean;
        row["attacks"] = r.attack_accuracy;
        row["train_wall_seconds"] = r.train_wall_seconds;
        j["rows"].push_back(row);
    }
    out.report_json = paths.reports() / ("ablate_" + suite + ".json");
    write_text_file(out.report_json, j.dump(2) + "\n");

    // Mean-over-seeds table with the wall-time column.
    std::ostringstream table;
    std::size_t name_w = 8;
    for (const auto& v : grid) name_w = std::max(name_w, v.row.size());
    table << std::left << std::setw(static_cast<int>(name_w + 2)) << "Variant" << std::right
          << std::setw(9) << "Clean";
    for (const NamedAttack& na : cfg.attacks) {
        table << std::setw(std::max<int>(9, static_cast<int>(na.name.size()) + 2)) << na.name;
    }
    table << std::setw(12) << "Time (s)" << '\n';
    for (const auto& v : grid) {
        double clean = 0.0, wall = 0.0;
        std::map<std::string, double> accs;
        long count = 0;
        for (const AblateRowResult& r : out.results) {
            if (r.row != v.row) continue;
            clean += r.clean;
            wall += r.train_wall_seconds;
            for (auto& [k, val] : r.attack_accuracy) accs[k] += val;
            ++count;
        }
        table << std::left << std::setw(static_cast<int>(name_w + 2)) << v.row << std::right
              << std::setw(9) << std::fixed << std::setprecision(2) << clean / count * 100.0;
        for (const NamedAttack& na : cfg.attacks) {
            table << std::setw(std::max<int>(9, static_cast<int>(na.name.size()) + 2))
                  << std::fixed << std::setprecision(2) << accs[na.name] / count * 100.0;
        }
        table << std::setw(12) << std::fixed << std::setprecision(1) << wall / count << '\n';
    }
    out.report_txt = paths.reports() / ("ablate_" + suite + ".txt");
    write_text_file(out.report_txt, table.str());
    return out;
}

}  // namespace lisard
