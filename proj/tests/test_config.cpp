#include <gtest/gtest.h>

#include "lisard/experiment.hpp"

using namespace lisard;

namespace {

json tiny_config(const std::string& out_dir) {
    return json{{"name", "tiny"},
                {"seed", 3},
                {"output_dir", out_dir},
                {"dataset",
                 {{"kind", "synthetic"},
                  {"n_train", 64},
                  {"n_test", 32},
                  {"classes", 4},
                  {"image", {3, 8, 8}}}},
                {"backbone", {{"name", "toycnn"}, {"init_seed", 1}}},
                {"train",
                 {{"mode", "lisard"},
                  {"epochs", 2},
                  {"batch_size", 32},
                  {"lr", 0.02},
                  {"checkpoint_every", 1},
                  {"strict_determinism", true}}},
                {"loss", {{"tau", 2.0}}},
                {"attacks", json::array({{{"name", "PGD"},
                                          {"kind", "pgd"},
                                          {"epsilon", 8.0 / 255.0},
                                          {"steps", 2}}})}};
}

fs::path fresh_dir(const std::string& leaf) {
    fs::path dir = fs::path(testing::TempDir()) / leaf;
    fs::remove_all(dir);
    return dir;
}

}  // namespace

TEST(Config, PresetsParseAndValidate) {
    for (const char* name : {"paper-cifar10-lisard", "paper-tinyimagenet", "desk-toy"}) {
        ExperimentConfig cfg = parse_config(preset_config(name));
        EXPECT_EQ(cfg.name, name);
        EXPECT_EQ(cfg.attacks.size(), 3u) << name;
    }
    EXPECT_THROW(preset_config("nope"), ConfigError);
}

TEST(Config, PaperPresetsCarryPaperSettings) {
    ExperimentConfig c10 = parse_config(preset_config("paper-cifar10-lisard"));
    EXPECT_EQ(c10.train.epochs, 200);
    EXPECT_EQ(c10.train.batch_size, 2048);
    EXPECT_DOUBLE_EQ(c10.train.lr, 0.001);
    EXPECT_DOUBLE_EQ(c10.train.momentum, 0.9);
    EXPECT_DOUBLE_EQ(c10.train.weight_decay, 0.0005);
    EXPECT_DOUBLE_EQ(c10.train.weights.alpha0, 0.5);
    EXPECT_DOUBLE_EQ(c10.train.weights.delta, 1.0 / 400.0);
    EXPECT_DOUBLE_EQ(c10.attacks[0].spec.epsilon, 8.0 / 255.0);
    EXPECT_EQ(c10.attacks[1].spec.steps, 10);
    EXPECT_DOUBLE_EQ(c10.attacks[1].spec.step_size, 2.0 / 255.0);
    EXPECT_EQ(c10.backbone.num_classes, 10);

    ExperimentConfig tiny = parse_config(preset_config("paper-tinyimagenet"));
    EXPECT_DOUBLE_EQ(tiny.attacks[0].spec.epsilon, 4.0 / 255.0);
    EXPECT_DOUBLE_EQ(tiny.train.noise.mu, 4.0 / 255.0);
    EXPECT_EQ(tiny.backbone.num_classes, 200);
    EXPECT_EQ(tiny.backbone.input_spec, (std::array<long, 3>{3, 64, 64}));
}

TEST(Config, UnknownKeyIsHardErrorNamingTheKey) {
    json j = tiny_config("out/x");
    j["unknown_top"] = 1;
    try {
        parse_config(j);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("unknown_top"), std::string::npos);
    }
    j = tiny_config("out/x");
    j["train"]["learning_rate"] = 0.1;  // misspelled leaf
    try {
        parse_config(j);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("train.learning_rate"), std::string::npos);
    }
    j = tiny_config("out/x");
    j["attacks"][0]["epsilonn"] = 0.1;
    EXPECT_THROW(parse_config(j), ConfigError);
}

TEST(Config, TauMustBeExplicitForLisard) {
    json j = tiny_config("out/x");
    j["loss"].erase("tau");
    try {
        parse_config(j);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("tau"), std::string::npos);
    }
    j["train"]["mode"] = "standard";
    EXPECT_NO_THROW(parse_config(j));
}

TEST(Config, AaSlotMapsToLabeledPgdSubstitute) {
    json j = tiny_config("out/x");
    j["attacks"].push_back({{"kind", "aa"}, {"epsilon", 8.0 / 255.0}, {"steps", 2}});
    ExperimentConfig cfg = parse_config(j);
    const NamedAttack& aa = cfg.attacks.back();
    EXPECT_EQ(aa.name, "AA-substitute (PGDx5 restarts)");
    EXPECT_EQ(aa.spec.kind, AttackKind::pgd);
    EXPECT_EQ(aa.spec.restarts, 5);
    EXPECT_TRUE(aa.spec.random_start);
}

TEST(Config, DatasetDrivesBackboneShape) {
    json j = tiny_config("out/x");
    j["dataset"] = {{"kind", "cifar100"}, {"path", "unused"}};
    ExperimentConfig cfg = parse_config(j);
    EXPECT_EQ(cfg.backbone.num_classes, 100);
    EXPECT_EQ(cfg.backbone.input_spec, (std::array<long, 3>{3, 32, 32}));
}

TEST(Config, OverridesReplaceScalarLeaves) {
    json j = tiny_config("out/x");
    apply_override(j, "train.epochs", "7");
    apply_override(j, "dataset.kind", "synthetic");
    apply_override(j, "train.strict_determinism", "false");
    ExperimentConfig cfg = parse_config(j);
    EXPECT_EQ(cfg.train.epochs, 7);
    EXPECT_FALSE(cfg.train.strict_determinism);
    EXPECT_THROW(apply_override(j, "nosuch.section", "1"), ConfigError);
}

TEST(Config, RoundTripThroughJson) {
    ExperimentConfig cfg = parse_config(tiny_config("out/x"));
    ExperimentConfig back = parse_config(config_to_json(cfg));
    EXPECT_EQ(back.name, cfg.name);
    EXPECT_EQ(back.train.epochs, cfg.train.epochs);
    EXPECT_EQ(back.attacks.size(), cfg.attacks.size());
    EXPECT_EQ(train_config_hash(back.train), train_config_hash(cfg.train));
}

TEST(Config, SyntheticSplitsShareClassesNotSamples) {
    ExperimentConfig cfg = parse_config(tiny_config("out/x"));
    DatasetHandle train = load_dataset(cfg.dataset, Split::train, cfg.seed);
    DatasetHandle test = load_dataset(cfg.dataset, Split::test, cfg.seed);
    EXPECT_EQ(train.length(), 64);
    EXPECT_EQ(test.length(), 32);
    EXPECT_EQ(train.num_classes, test.num_classes);
    EXPECT_NE(std::vector<float>(train.pixels.begin(), train.pixels.begin() + test.pixels.size()),
              test.pixels);
}

TEST(Config, SubsetCapsApply) {
    json j = tiny_config("out/x");
    j["dataset"]["subset_train"] = 10;
    j["dataset"]["subset_test"] = 5;
    ExperimentConfig cfg = parse_config(j);
    EXPECT_EQ(load_dataset(cfg.dataset, Split::train, 0).length(), 10);
    EXPECT_EQ(load_dataset(cfg.dataset, Split::test, 0).length(), 5);
}

TEST(Experiment, TrainWritesSelfDescribingTree) {
    fs::path dir = fresh_dir("exp_tree");
    json j = tiny_config(dir.string());
    ExperimentConfig cfg = parse_config(j);
    TrainOutputs out = train_experiment(cfg);
    EXPECT_TRUE(out.finished);
    EXPECT_TRUE(fs::exists(dir / "config.snapshot.json"));
    EXPECT_TRUE(fs::exists(dir / "weights" / "final.wt"));
    EXPECT_TRUE(fs::exists(dir / "weights" / "final.wt.json"));
    EXPECT_TRUE(fs::exists(dir / "records" / "train_record.csv"));
    std::ifstream snap(dir / "config.snapshot.json");
    json stored;
    snap >> stored;
    EXPECT_NO_THROW(parse_config(stored));
}

TEST(Experiment, InterruptedRunResumesExactly) {
    fs::path dir_full = fresh_dir("exp_full");
    fs::path dir_resume = fresh_dir("exp_resume");
    json j = tiny_config(dir_full.string());
    j["train"]["epochs"] = 4;
    ExperimentConfig full_cfg = parse_config(j);
    TrainOutputs full = train_experiment(full_cfg);

    j["output_dir"] = dir_resume.string();
    ExperimentConfig resume_cfg = parse_config(j);
    TrainOutputs stopped = train_experiment(resume_cfg, 2);
    EXPECT_FALSE(stopped.finished);
    EXPECT_EQ(stopped.record.rows.size(), 2u);
    TrainOutputs resumed = train_experiment(resume_cfg);
    EXPECT_TRUE(resumed.finished);
    EXPECT_EQ(resumed.started_at_epoch, 3);
    EXPECT_EQ(resumed.record.to_csv(), full.record.to_csv());
    EXPECT_EQ(weights_checksum((dir_resume / "weights" / "final.wt").string()),
              weights_checksum((dir_full / "weights" / "final.wt").string()));
}

TEST(Experiment, CompletedRunIsNoOpOnRerun) {
    fs::path dir = fresh_dir("exp_done");
    ExperimentConfig cfg = parse_config(tiny_config(dir.string()));
    TrainOutputs first = train_experiment(cfg);
    TrainOutputs second = train_experiment(cfg);
    EXPECT_TRUE(second.finished);
    EXPECT_EQ(second.record.to_csv(), first.record.to_csv());
}

TEST(Experiment, InterruptionAtFinalEpochStillFinalizes) {
    fs::path dir = fresh_dir("exp_final_stop");
    json j = tiny_config(dir.string());
    j["train"]["epochs"] = 2;
    ExperimentConfig cfg = parse_config(j);
    TrainOutputs stopped = train_experiment(cfg, 2);
    EXPECT_FALSE(stopped.finished);
    EXPECT_FALSE(fs::exists(dir / "weights" / "final.wt"));
    TrainOutputs done = train_experiment(cfg);
    EXPECT_TRUE(done.finished);
    EXPECT_TRUE(fs::exists(dir / "weights" / "final.wt"));
    EXPECT_EQ(done.record.rows.size(), 2u);
}

TEST(Experiment, IncompatibleCheckpointIsConfigError) {
    fs::path dir = fresh_dir("exp_incompat");
    json j = tiny_config(dir.string());
    j["train"]["epochs"] = 3;
    train_experiment(parse_config(j), 1);  // leaves an epoch-1 checkpoint
    j["train"]["lr"] = 0.5;                // different training config
    EXPECT_THROW(train_experiment(parse_config(j)), ConfigError);
}

TEST(Experiment, FindAttackMatchesNamesAndAliases) {
    json j = tiny_config("out/x");
    j["attacks"] = json::array({{{"name", "FGSM"}, {"kind", "fgsm"}, {"epsilon", 0.03}},
                                {{"name", "PGD"}, {"kind", "pgd"}, {"epsilon", 0.03}, {"steps", 2}},
                                {{"kind", "aa"}, {"epsilon", 0.03}, {"steps", 2}}});
    ExperimentConfig cfg = parse_config(j);
    EXPECT_EQ(find_attack(cfg, "fgsm").spec.kind, AttackKind::fgsm);
    EXPECT_EQ(find_attack(cfg, "PGD").name, "PGD");
    EXPECT_EQ(find_attack(cfg, "aa").spec.restarts, 5);
    try {
        find_attack(cfg, "square");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("FGSM"), std::string::npos);
    }
}

TEST(Experiment, GenAdvsetRequiresSurrogate) {
    fs::path dir = fresh_dir("exp_gen_missing");
    json j = tiny_config(dir.string());
    ExperimentConfig cfg = parse_config(j);
    cfg.graybox.surrogate_weights = (dir / "nope.wt").string();
    try {
        gen_advset_experiment(cfg, "pgd");
        FAIL() << "expected IoError";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("nope.wt"), std::string::npos);
    }
}

TEST(Experiment, AblateUnknownSuiteListsSuites) {
    ExperimentConfig cfg = parse_config(tiny_config("out/x"));
    try {
        ablate_experiment(cfg, "bogus", 1);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("perturb-mode"), std::string::npos);
        EXPECT_NE(msg.find("loss-terms"), std::string::npos);
        EXPECT_NE(msg.find("components"), std::string::npos);
    }
}

TEST(Experiment, AblateSuitesProduceCompleteGrids) {
    fs::path dir = fresh_dir("exp_ablate");
    json j = tiny_config(dir.string());
    j["train"]["epochs"] = 1;
    j["attacks"] = json::array(
        {{{"name", "PGD"}, {"kind", "pgd"}, {"epsilon", 8.0 / 255.0}, {"steps", 2}}});
    ExperimentConfig cfg = parse_config(j);

    AblateOutputs comp = ablate_experiment(cfg, "components", 1);
    ASSERT_EQ(comp.results.size(), 4u);
    EXPECT_EQ(comp.results[0].row, "wo/ alpha and wo/ tau");
    EXPECT_EQ(comp.results[3].row, "w/ alpha and w/ tau");
    EXPECT_TRUE(fs::exists(comp.report_json));
    std::ifstream is(comp.report_txt);
    std::string table((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    EXPECT_NE(table.find("Time (s)"), std::string::npos);

    AblateOutputs pm = ablate_experiment(cfg, "perturb-mode", 1);
    ASSERT_EQ(pm.results.size(), 3u);
    EXPECT_EQ(pm.results[0].row, "random");
    EXPECT_EQ(pm.results[1].row, "fgsm");
    EXPECT_EQ(pm.results[2].row, "pgd");

    AblateOutputs lt = ablate_experiment(cfg, "loss-terms", 1);
    ASSERT_EQ(lt.results.size(), 3u);
    EXPECT_EQ(lt.results[0].row, "L_C only");
}
