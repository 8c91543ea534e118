#pragma once
// Experiment configuration: a single JSON document with hard validation
// (unknown keys are errors), dotted-path overrides, and the shipped presets.

#include <cstdlib>
#include <set>

#include "lisard/evalkit.hpp"

namespace lisard {

struct DatasetConfig {
    std::string kind = "synthetic";  // synthetic | cifar10 | cifar100 | tiny-imagenet
    std::string path;
    long n_train = 2000;  // synthetic only
    long n_test = 500;
    long classes = 10;
    std::array<long, 3> image = {3, 32, 32};
    long subset_train = 0;  // 0 = use everything
    long subset_test = 0;
    bool augment = false;
};

struct GrayboxConfig {
    std::string surrogate_weights;
    std::uint64_t surrogate_seed = 9001;  // ablation suites train their own surrogate
    std::vector<std::string> target_weights;
    bool allow_self_target = false;
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::uint64_t seed = 0;
    std::string output_dir = "out/experiment";
    DatasetConfig dataset;
    BackboneSpec backbone{"toycnn", 10, {3, 32, 32}, 0};
    TrainConfig train;
    std::vector<NamedAttack> attacks;
    GrayboxConfig graybox;
};

// ---------------------------------------------------------------------------
// Validation helpers

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
    if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key())) {
            throw ConfigError("unknown config key '" +
                              (where.empty() ? it.key() : where + "." + it.key()) + "'");
        }
    }
}

template <typename T>
T get_field(const json& j, const std::string& key, const T& fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const std::exception& e) {
        throw ConfigError("bad value for config key '" + where + "." + key + "': " + e.what());
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parsing

inline NamedAttack parse_attack(const json& j, const std::string& where) {
    detail::check_keys(j, {"name", "kind", "epsilon", "step_size", "steps", "random_start",
                           "restarts", "seed"},
                       where);
    std::string kind = detail::get_field<std::string>(j, "kind", "pgd", where);
    NamedAttack na;
    na.spec.epsilon = detail::get_field<double>(j, "epsilon", 8.0 / 255.0, where);
    na.spec.step_size = detail::get_field<double>(j, "step_size", 2.0 / 255.0, where);
    na.spec.steps = detail::get_field<long>(j, "steps", 10, where);
    na.spec.random_start = detail::get_field<bool>(j, "random_start", true, where);
    na.spec.restarts = detail::get_field<long>(j, "restarts", 1, where);
    na.spec.seed = detail::get_field<std::uint64_t>(j, "seed", 7, where);
    if (kind == "fgsm") {
        na.spec.kind = AttackKind::fgsm;
        na.name = detail::get_field<std::string>(j, "name", "FGSM", where);
    } else if (kind == "pgd") {
        na.spec.kind = AttackKind::pgd;
        na.name = detail::get_field<std::string>(j, "name", "PGD", where);
    } else if (kind == "aa") {
        // The AutoAttack slot maps to multi-restart PGD and is always
        // labeled as a substitute, never silently.
        na.spec.kind = AttackKind::pgd;
        na.spec.restarts = detail::get_field<long>(j, "restarts", 5, where);
        na.spec.random_start = true;
        na.name = "AA-substitute (PGDx" + std::to_string(na.spec.restarts) + " restarts)";
    } else {
        throw ConfigError("unknown attack kind '" + kind + "' at " + where +
                          " (known: fgsm, pgd, aa)");
    }
    na.spec.validate();
    return na;
}

inline ExperimentConfig parse_config(const json& j) {
    detail::check_keys(j, {"name", "seed", "output_dir", "dataset", "backbone", "train", "noise",
                           "train_attack", "loss", "attacks", "graybox"},
                       "");
    ExperimentConfig cfg;
    cfg.name = detail::get_field<std::string>(j, "name", cfg.name, "");
    cfg.seed = detail::get_field<std::uint64_t>(j, "seed", 0, "");
    cfg.output_dir = detail::get_field<std::string>(j, "output_dir", "out/" + cfg.name, "");

    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        detail::check_keys(d, {"kind", "path", "n_train", "n_test", "classes", "image",
                               "subset_train", "subset_test", "augment"},
                           "dataset");
        cfg.dataset.kind = detail::get_field<std::string>(d, "kind", "synthetic", "dataset");
        cfg.dataset.path = detail::get_field<std::string>(d, "path", "", "dataset");
        cfg.dataset.n_train = detail::get_field<long>(d, "n_train", 2000, "dataset");
        cfg.dataset.n_test = detail::get_field<long>(d, "n_test", 500, "dataset");
        cfg.dataset.classes = detail::get_field<long>(d, "classes", 10, "dataset");
        if (d.contains("image")) {
            auto v = d.at("image").get<std::vector<long>>();
            if (v.size() != 3) throw ConfigError("dataset.image must be [C,H,W]");
            cfg.dataset.image = {v[0], v[1], v[2]};
        }
        cfg.dataset.subset_train = detail::get_field<long>(d, "subset_train", 0, "dataset");
        cfg.dataset.subset_test = detail::get_field<long>(d, "subset_test", 0, "dataset");
        cfg.dataset.augment = detail::get_field<bool>(d, "augment", false, "dataset");
        static const std::set<std::string> kinds = {"synthetic", "cifar10", "cifar100",
                                                    "tiny-imagenet"};
        if (!kinds.count(cfg.dataset.kind)) {
            throw ConfigError("unknown dataset.kind '" + cfg.dataset.kind + "'");
        }
    }

    if (j.contains("backbone")) {
        const json& b = j.at("backbone");
        detail::check_keys(b, {"name", "init_seed"}, "backbone");
        cfg.backbone.name = detail::get_field<std::string>(b, "name", "toycnn", "backbone");
        cfg.backbone.init_seed = detail::get_field<std::uint64_t>(b, "init_seed", 0, "backbone");
    }
    // Class count and input spec follow the dataset.
    if (cfg.dataset.kind == "cifar10") {
        cfg.backbone.num_classes = 10;
        cfg.backbone.input_spec = {3, 32, 32};
    } else if (cfg.dataset.kind == "cifar100") {
        cfg.backbone.num_classes = 100;
        cfg.backbone.input_spec = {3, 32, 32};
    } else if (cfg.dataset.kind == "tiny-imagenet") {
        cfg.backbone.num_classes = 200;
        cfg.backbone.input_spec = {3, 64, 64};
    } else {
        cfg.backbone.num_classes = cfg.dataset.classes;
        cfg.backbone.input_spec = cfg.dataset.image;
    }

    if (j.contains("train")) {
        const json& t = j.at("train");
        detail::check_keys(t, {"mode", "epochs", "batch_size", "lr", "momentum", "weight_decay",
                               "perturb_mode", "checkpoint_every", "micro_batches",
                               "strict_determinism"},
                           "train");
        std::string mode = detail::get_field<std::string>(t, "mode", "lisard", "train");
        if (mode == "standard") {
            cfg.train.mode = TrainMode::standard;
        } else if (mode == "lisard") {
            cfg.train.mode = TrainMode::lisard;
        } else {
            throw ConfigError("unknown train.mode '" + mode + "' (known: standard, lisard)");
        }
        cfg.train.epochs = detail::get_field<long>(t, "epochs", 200, "train");
        cfg.train.batch_size = detail::get_field<long>(t, "batch_size", 2048, "train");
        cfg.train.lr = detail::get_field<double>(t, "lr", 0.001, "train");
        cfg.train.momentum = detail::get_field<double>(t, "momentum", 0.9, "train");
        cfg.train.weight_decay = detail::get_field<double>(t, "weight_decay", 0.0005, "train");
        std::string pm = detail::get_field<std::string>(t, "perturb_mode", "random", "train");
        if (pm == "random") {
            cfg.train.perturb_mode = PerturbMode::random;
        } else if (pm == "fgsm") {
            cfg.train.perturb_mode = PerturbMode::fgsm;
        } else if (pm == "pgd") {
            cfg.train.perturb_mode = PerturbMode::pgd;
        } else {
            throw ConfigError("unknown train.perturb_mode '" + pm +
                              "' (known: random, fgsm, pgd)");
        }
        cfg.train.checkpoint_every = detail::get_field<long>(t, "checkpoint_every", 50, "train");
        cfg.train.micro_batches = detail::get_field<long>(t, "micro_batches", 1, "train");
        cfg.train.strict_determinism =
            detail::get_field<bool>(t, "strict_determinism", false, "train");
    }
    cfg.train.seed = cfg.seed;
    cfg.train.augment = cfg.dataset.augment;

    if (j.contains("noise")) {
        const json& n = j.at("noise");
        detail::check_keys(n, {"mu", "clamp"}, "noise");
        cfg.train.noise.mu = detail::get_field<double>(n, "mu", 8.0 / 255.0, "noise");
        cfg.train.noise.clamp = detail::get_field<bool>(n, "clamp", true, "noise");
    } else if (cfg.dataset.kind == "tiny-imagenet") {
        cfg.train.noise.mu = 4.0 / 255.0;  // mirrors the smaller attack budget
    }

    if (j.contains("train_attack")) {
        cfg.train.attack = parse_attack(j.at("train_attack"), "train_attack").spec;
    }

    if (j.contains("loss")) {
        const json& l = j.at("loss");
        detail::check_keys(l, {"lambda", "tau", "alpha0", "delta", "include_lc", "include_lr"},
                           "loss");
        cfg.train.weights.lambda_ = detail::get_field<double>(l, "lambda", 5e-3, "loss");
        if (l.contains("tau")) cfg.train.weights.tau = l.at("tau").get<double>();
        cfg.train.weights.alpha0 = detail::get_field<double>(l, "alpha0", 0.5, "loss");
        cfg.train.weights.delta = detail::get_field<double>(l, "delta", 1.0 / 400.0, "loss");
        cfg.train.include_lc = detail::get_field<bool>(l, "include_lc", true, "loss");
        cfg.train.include_lr = detail::get_field<bool>(l, "include_lr", true, "loss");
    }
    // The temperature is load-bearing and has no published value: a
    // similarity-trained run must state it explicitly.
    if (cfg.train.mode == TrainMode::lisard &&
        !(j.contains("loss") && j.at("loss").contains("tau"))) {
        throw ConfigError("loss.tau must be stated explicitly for train.mode = lisard");
    }

    if (j.contains("attacks")) {
        const json& arr = j.at("attacks");
        if (!arr.is_array()) throw ConfigError("attacks must be an array");
        for (std::size_t i = 0; i < arr.size(); ++i) {
            cfg.attacks.push_back(parse_attack(arr[i], "attacks[" + std::to_string(i) + "]"));
        }
    }

    if (j.contains("graybox")) {
        const json& g = j.at("graybox");
        detail::check_keys(g, {"surrogate_weights", "surrogate_seed", "target_weights",
                               "allow_self_target"},
                           "graybox");
        cfg.graybox.surrogate_weights =
            detail::get_field<std::string>(g, "surrogate_weights", "", "graybox");
        cfg.graybox.surrogate_seed =
            detail::get_field<std::uint64_t>(g, "surrogate_seed", 9001, "graybox");
        if (g.contains("target_weights")) {
            cfg.graybox.target_weights = g.at("target_weights").get<std::vector<std::string>>();
        }
        cfg.graybox.allow_self_target =
            detail::get_field<bool>(g, "allow_self_target", false, "graybox");
    }
    cfg.train.validate();
    return cfg;
}

inline json config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["name"] = cfg.name;
    j["seed"] = cfg.seed;
    j["output_dir"] = cfg.output_dir;
    j["dataset"] = {{"kind", cfg.dataset.kind},
                    {"path", cfg.dataset.path},
                    {"n_train", cfg.dataset.n_train},
                    {"n_test", cfg.dataset.n_test},
                    {"classes", cfg.dataset.classes},
                    {"image", {cfg.dataset.image[0], cfg.dataset.image[1], cfg.dataset.image[2]}},
                    {"subset_train", cfg.dataset.subset_train},
                    {"subset_test", cfg.dataset.subset_test},
                    {"augment", cfg.dataset.augment}};
    j["backbone"] = {{"name", cfg.backbone.name}, {"init_seed", cfg.backbone.init_seed}};
    j["train"] = {{"mode", train_mode_name(cfg.train.mode)},
                  {"epochs", cfg.train.epochs},
                  {"batch_size", cfg.train.batch_size},
                  {"lr", cfg.train.lr},
                  {"momentum", cfg.train.momentum},
                  {"weight_decay", cfg.train.weight_decay},
                  {"perturb_mode", perturb_mode_name(cfg.train.perturb_mode)},
                  {"checkpoint_every", cfg.train.checkpoint_every},
                  {"micro_batches", cfg.train.micro_batches},
                  {"strict_determinism", cfg.train.strict_determinism}};
    j["noise"] = {{"mu", cfg.train.noise.mu}, {"clamp", cfg.train.noise.clamp}};
    j["train_attack"] = cfg.train.attack;
    j["loss"] = {{"lambda", cfg.train.weights.lambda_},
                 {"tau", cfg.train.weights.tau},
                 {"alpha0", cfg.train.weights.alpha0},
                 {"delta", cfg.train.weights.delta},
                 {"include_lc", cfg.train.include_lc},
                 {"include_lr", cfg.train.include_lr}};
    j["attacks"] = json::array();
    for (const NamedAttack& na : cfg.attacks) {
        json a = na.spec;
        a["name"] = na.name;
        j["attacks"].push_back(a);
    }
    j["graybox"] = {{"surrogate_weights", cfg.graybox.surrogate_weights},
                    {"surrogate_seed", cfg.graybox.surrogate_seed},
                    {"target_weights", cfg.graybox.target_weights},
                    {"allow_self_target", cfg.graybox.allow_self_target}};
    return j;
}

// ---------------------------------------------------------------------------
// Overrides: --set dotted.key=value on scalar leaves.

inline void apply_override(json& j, const std::string& dotted, const std::string& value) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : dotted) {
        if (c == '.') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    parts.push_back(cur);
    json* node = &j;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->contains(parts[i])) {
            throw ConfigError("override path '" + dotted + "': no such section '" + parts[i] +
                              "'");
        }
        node = &(*node)[parts[i]];
    }
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (...) {
        parsed = value;  // bare strings are allowed
    }
    (*node)[parts.back()] = parsed;
}

// ---------------------------------------------------------------------------
// Presets

inline json preset_config(const std::string& name) {
    const double eps_cifar = 8.0 / 255.0;
    const double eps_tiny = 4.0 / 255.0;
    auto attack_list = [](double eps) {
        return json::array({{{"name", "FGSM"}, {"kind", "fgsm"}, {"epsilon", eps}},
                            {{"name", "PGD"},
                             {"kind", "pgd"},
                             {"epsilon", eps},
                             {"step_size", 2.0 / 255.0},
                             {"steps", 10},
                             {"random_start", true}},
                            {{"kind", "aa"}, {"epsilon", eps}, {"step_size", 2.0 / 255.0},
                             {"steps", 10}, {"restarts", 5}}});
    };
    if (name == "paper-cifar10-lisard") {
        return json{{"name", "paper-cifar10-lisard"},
                    {"seed", 0},
                    {"output_dir", "out/paper-cifar10-lisard"},
                    {"dataset", {{"kind", "cifar10"}, {"path", "data/cifar-10-batches-bin"}}},
                    {"backbone", {{"name", "resnet18"}, {"init_seed", 1}}},
                    {"train",
                     {{"mode", "lisard"},
                      {"epochs", 200},
                      {"batch_size", 2048},
                      {"lr", 0.001},
                      {"momentum", 0.9},
                      {"weight_decay", 0.0005},
                      {"perturb_mode", "random"}}},
                    {"noise", {{"mu", eps_cifar}, {"clamp", true}}},
                    {"loss",
                     {{"lambda", 5e-3}, {"tau", 2.0}, {"alpha0", 0.5}, {"delta", 1.0 / 400.0}}},
                    {"attacks", attack_list(eps_cifar)}};
    }
    if (name == "paper-tinyimagenet") {
        return json{{"name", "paper-tinyimagenet"},
                    {"seed", 0},
                    {"output_dir", "out/paper-tinyimagenet"},
                    {"dataset", {{"kind", "tiny-imagenet"}, {"path", "data/tiny-imagenet-200"}}},
                    {"backbone", {{"name", "resnet18"}, {"init_seed", 1}}},
                    {"train",
                     {{"mode", "lisard"},
                      {"epochs", 200},
                      {"batch_size", 2048},
                      {"lr", 0.001},
                      {"momentum", 0.9},
                      {"weight_decay", 0.0005},
                      {"perturb_mode", "random"}}},
                    {"noise", {{"mu", eps_tiny}, {"clamp", true}}},
                    {"loss",
                     {{"lambda", 5e-3}, {"tau", 2.0}, {"alpha0", 0.5}, {"delta", 1.0 / 400.0}}},
                    {"attacks", attack_list(eps_tiny)}};
    }
    if (name == "desk-toy") {
        return json{{"name", "desk-toy"},
                    {"seed", 0},
                    {"output_dir", "out/desk-toy"},
                    {"dataset",
                     {{"kind", "synthetic"},
                      {"n_train", 2000},
                      {"n_test", 500},
                      {"classes", 10},
                      {"image", {3, 32, 32}}}},
                    {"backbone", {{"name", "toycnn"}, {"init_seed", 1}}},
                    {"train",
                     {{"mode", "lisard"},
                      {"epochs", 15},
                      {"batch_size", 256},
                      {"lr", 0.01},
                      {"momentum", 0.9},
                      {"weight_decay", 0.0005},
                      {"perturb_mode", "random"},
                      {"checkpoint_every", 5}}},
                    {"noise", {{"mu", eps_cifar}, {"clamp", true}}},
                    {"loss",
                     {{"lambda", 5e-3}, {"tau", 2.0}, {"alpha0", 0.5}, {"delta", 1.0 / 400.0}}},
                    {"attacks", attack_list(eps_cifar)}};
    }
    throw ConfigError("unknown preset '" + name +
                      "' (known: paper-cifar10-lisard, paper-tinyimagenet, desk-toy)");
}

// ---------------------------------------------------------------------------
// Dataset loading from config

inline DatasetHandle load_dataset(const DatasetConfig& d, Split split, std::uint64_t seed) {
    DatasetHandle ds;
    if (d.kind == "synthetic") {
        long n = split == Split::train ? d.n_train : d.n_test;
        long offset = split == Split::train ? 0 : d.n_train;
        ds = make_synthetic(n, d.classes, d.image, mix_seed(seed, stream::synth, 0xda7a), 0.12,
                            0.06, offset);
        ds.split = split;
    } else if (d.kind == "cifar10") {
        ds = load_cifar(d.path, CifarVariant::c10, split);
    } else if (d.kind == "cifar100") {
        ds = load_cifar(d.path, CifarVariant::c100, split);
    } else if (d.kind == "tiny-imagenet") {
        ds = load_tiny_imagenet(d.path, split);
    } else {
        throw ConfigError("unknown dataset kind '" + d.kind + "'");
    }
    long cap = split == Split::train ? d.subset_train : d.subset_test;
    if (cap > 0 && cap < ds.length()) ds = subset(ds, cap);
    return ds;
}

inline std::string output_root() {
    const char* env = std::getenv("LISARD_OUTPUT_ROOT");
    return env ? std::string(env) : std::string();
}

inline fs::path resolve_output_dir(const ExperimentConfig& cfg) {
    fs::path dir(cfg.output_dir);
    if (dir.is_relative() && !output_root().empty()) dir = fs::path(output_root()) / dir;
    return dir;
}

}  // namespace lisard
