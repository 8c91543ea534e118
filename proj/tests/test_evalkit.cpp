#include <gtest/gtest.h>

#include "lisard/evalkit.hpp"

using namespace lisard;

namespace {

// Gradient methods blow up on touch: proves the gray-box path never asks
// targets for gradients.
class NoGradientModel : public DifferentiableModel {
public:
    explicit NoGradientModel(std::unique_ptr<DifferentiableModel> inner)
        : inner_(std::move(inner)) {}

    void set_mode(Mode m) override { inner_->set_mode(m); }
    Mode mode() const override { return inner_->mode(); }
    long num_classes() const override { return inner_->num_classes(); }
    long embedding_width() const override { return inner_->embedding_width(); }
    std::array<long, 3> input_spec() const override { return inner_->input_spec(); }
    ForwardResult forward_full(const ImageBatch& x) override { return inner_->forward_full(x); }
    const BackboneSpec& spec() const override { return inner_->spec(); }

    ForwardResult forward_full_taped(const ImageBatch&, Tape&) override {
        throw std::logic_error("gradient-capable forward requested on an evaluation target");
    }
    Tensor backward_full(const Tensor&, const Tensor&, const Tape&) override {
        throw std::logic_error("gradient requested on an evaluation target");
    }
    std::vector<Param*> params() override {
        throw std::logic_error("parameters requested on an evaluation target");
    }
    void zero_grad() override { throw std::logic_error("zero_grad on an evaluation target"); }
    NamedState state() override { return inner_->state(); }

private:
    std::unique_ptr<DifferentiableModel> inner_;
};

DatasetHandle test_split(long n, std::uint64_t seed, long k = 4,
                         std::array<long, 3> img = {3, 8, 8}) {
    DatasetHandle ds = make_synthetic(n, k, img, seed);
    ds.split = Split::test;
    return ds;
}

std::unique_ptr<DifferentiableModel> trained_toy(std::uint64_t seed, const DatasetHandle& train) {
    auto model = build(BackboneSpec{"toycnn", train.num_classes, train.image_spec, seed});
    TrainConfig cfg;
    cfg.mode = TrainMode::standard;
    cfg.epochs = 10;
    cfg.batch_size = 64;
    cfg.lr = 0.05;
    cfg.seed = seed;
    train_standard(*model, train, cfg);
    model->set_mode(Mode::inference);
    return model;
}

AttackSpec pgd10(double eps = 8.0 / 255.0) {
    AttackSpec s;
    s.kind = AttackKind::pgd;
    s.epsilon = eps;
    s.step_size = 2.0 / 255.0;
    s.steps = 10;
    s.random_start = true;
    s.seed = 3;
    return s;
}

}  // namespace

TEST(Decidability, IdenticalSamplesGiveZero) {
    std::vector<double> a{0.5, 1.5, 2.5, 1.0};
    DecidabilityResult r = decidability(a, a);
    EXPECT_DOUBLE_EQ(r.dprime, 0.0);
}

TEST(Decidability, AnalyticTwoSigmaSeparation) {
    // means 0 and 2, unbiased variances exactly 1.
    std::vector<double> a{-1.0, 0.0, 1.0};
    std::vector<double> b{1.0, 2.0, 3.0};
    DecidabilityResult r = decidability(a, b);
    EXPECT_NEAR(r.dprime, 2.0, 1e-9);
    EXPECT_DOUBLE_EQ(r.mean_a, 0.0);
    EXPECT_DOUBLE_EQ(r.mean_b, 2.0);
}

TEST(Decidability, SymmetricAndScaleInvariant) {
    RngStream rng(4);
    std::vector<double> a, b;
    for (int i = 0; i < 500; ++i) {
        a.push_back(rng.normal());
        b.push_back(rng.normal() * 1.4 + 0.8);
    }
    DecidabilityResult ab = decidability(a, b);
    DecidabilityResult ba = decidability(b, a);
    EXPECT_NEAR(ab.dprime, ba.dprime, 1e-12);
    std::vector<double> a5 = a, b5 = b;
    for (auto& v : a5) v *= 5.0;
    for (auto& v : b5) v *= 5.0;
    EXPECT_NEAR(decidability(a5, b5).dprime, ab.dprime, 1e-9);
}

TEST(Decidability, ZeroVarianceUnequalMeansIsInfinity) {
    std::vector<double> a{1.0, 1.0, 1.0};
    std::vector<double> b{2.0, 2.0};
    EXPECT_TRUE(std::isinf(decidability(a, b).dprime));
}

TEST(Decidability, MonteCarloOneSigmaSeparation) {
    RngStream rng(5);
    std::vector<double> a, b;
    for (int i = 0; i < 10000; ++i) {
        a.push_back(rng.normal());
        b.push_back(rng.normal() + 1.0);
    }
    EXPECT_NEAR(decidability(a, b).dprime, 1.0, 0.05);
}

TEST(EmbeddingProjector, SplitHalfCleanDataHasNearZeroDprime) {
    DatasetHandle ds = test_split(2000, 6);
    auto model = trained_toy(7, ds);
    EmbeddingProjector proj;
    MatrixD emb = EmbeddingProjector::collect_embeddings(*model, ds);
    proj.fit(emb);
    EXPECT_EQ(proj.name(), "principal-axis-projection");
    std::vector<double> stat = proj.statistic(emb);
    std::vector<double> first(stat.begin(), stat.begin() + 1000);
    std::vector<double> second(stat.begin() + 1000, stat.end());
    EXPECT_LT(decidability(first, second).dprime, 0.1);
}

TEST(EmbeddingProjector, ConstantEmbeddingsTriggerRecordedFallback) {
    MatrixD constant = MatrixD::Ones(64, 8) * 3.0;
    EmbeddingProjector proj;
    proj.fit(constant);
    EXPECT_TRUE(proj.used_fallback());
    EXPECT_EQ(proj.name(), "l2-norm");
    std::vector<double> stat = proj.statistic(constant);
    EXPECT_NEAR(stat[0], 3.0 * std::sqrt(8.0), 1e-9);
}

TEST(RobustAccuracy, CleanArtifactEqualsCleanAccuracy) {
    DatasetHandle ds = test_split(128, 8);
    auto model = trained_toy(9, ds);
    AdvSetArtifact clean_art;
    clean_art.images = Tensor({ds.length(), 3, 8, 8});
    std::memcpy(clean_art.images.data(), ds.pixels.data(), sizeof(float) * ds.pixels.size());
    double robust = robust_accuracy(*model, clean_art, all_labels(ds));
    EXPECT_DOUBLE_EQ(robust, clean_accuracy(*model, ds));
}

TEST(RobustAccuracy, ShuffledLabelControlSitsAtChance) {
    DatasetHandle ds = test_split(1024, 10, 4);
    auto model = trained_toy(11, ds);
    AdvSetArtifact clean_art;
    clean_art.images = Tensor({ds.length(), 3, 8, 8});
    std::memcpy(clean_art.images.data(), ds.pixels.data(), sizeof(float) * ds.pixels.size());
    LabelBatch shuffled = all_labels(ds);
    RngStream rng(12);
    rng.shuffle(shuffled.labels);
    double acc = robust_accuracy(*model, clean_art, shuffled);
    const double k = ds.num_classes, n = ds.length();
    EXPECT_NEAR(acc, 1.0 / k, 3.0 * std::sqrt(k * n) / n);
}

TEST(RobustAccuracy, EmptyArtifactIsContractViolation) {
    DatasetHandle ds = test_split(8, 13);
    auto model = trained_toy(14, ds);
    AdvSetArtifact empty;
    empty.images = Tensor({0, 3, 8, 8});
    EXPECT_THROW(robust_accuracy(*model, empty, LabelBatch{}), ContractError);
}

TEST(AttackStrength, Pgd10BelowFgsmBelowClean) {
    DatasetHandle train = make_synthetic(768, 4, {3, 8, 8}, 15, 0.12, 0.06, 0);
    DatasetHandle test = make_synthetic(256, 4, {3, 8, 8}, 15, 0.12, 0.06, 768);
    test.split = Split::test;
    auto model = trained_toy(16, train);
    double clean = clean_accuracy(*model, test);
    const double eps = 8.0 / 255.0;
    std::string dir = testing::TempDir() + "strength";
    fs::remove_all(dir);
    AttackSpec f;
    f.kind = AttackKind::fgsm;
    f.epsilon = eps;
    AdvSetArtifact fa = generate_advset(*model, test, f, dir + "/fgsm");
    AdvSetArtifact pa = generate_advset(*model, test, pgd10(eps), dir + "/pgd");
    double acc_fgsm = robust_accuracy(*model, fa, all_labels(test));
    double acc_pgd = robust_accuracy(*model, pa, all_labels(test));
    EXPECT_LE(acc_pgd, acc_fgsm + 1e-9);
    EXPECT_LE(acc_fgsm, clean + 1e-9);
    EXPECT_LT(acc_pgd, clean);  // the attack must actually bite
}

TEST(GrayBox, SelfTargetForcedMatchesDirectWhiteBox) {
    DatasetHandle test = test_split(256, 17);
    DatasetHandle train = make_synthetic(512, 4, {3, 8, 8}, 18);
    auto model = trained_toy(19, train);
    std::string dir = testing::TempDir() + "graybox_self";
    fs::remove_all(dir);

    GrayBoxModels models;
    models.surrogate = model.get();
    models.surrogate_id = "m";
    models.targets = {model.get()};
    models.target_ids = {"m"};
    models.target_hashes = {model_state_sha256(*model)};
    GrayBoxOptions opt;
    opt.advset_dir = dir;
    opt.allow_self_target = true;
    opt.compute_dprime = false;
    EvalReport rep = run_graybox(models, test, {{"PGD", pgd10()}}, opt);

    AdvSetArtifact direct = generate_advset(*model, test, pgd10(), dir + "/direct");
    double white_box = robust_accuracy(*model, direct, all_labels(test));
    EXPECT_NEAR(rep.lookup("m", "PGD"), white_box, 0.001);
}

TEST(GrayBox, SelfTargetWithoutOverrideIsProtocolViolation) {
    DatasetHandle test = test_split(64, 20);
    DatasetHandle train = make_synthetic(128, 4, {3, 8, 8}, 21);
    auto model = trained_toy(22, train);
    GrayBoxModels models;
    models.surrogate = model.get();
    models.targets = {model.get()};
    models.target_ids = {"m"};
    models.target_hashes = {model_state_sha256(*model)};
    GrayBoxOptions opt;
    opt.advset_dir = testing::TempDir() + "graybox_violation";
    EXPECT_THROW(run_graybox(models, test, {{"PGD", pgd10()}}, opt), ProtocolError);
}

TEST(GrayBox, TargetsAreNeverAskedForGradients) {
    DatasetHandle test = test_split(128, 23);
    DatasetHandle train = make_synthetic(256, 4, {3, 8, 8}, 24);
    auto surrogate = trained_toy(25, train);
    auto target_inner = trained_toy(26, train);
    NoGradientModel target(std::move(target_inner));
    std::string dir = testing::TempDir() + "graybox_nograd";
    fs::remove_all(dir);

    GrayBoxModels models;
    models.surrogate = surrogate.get();
    models.surrogate_id = "surrogate";
    models.targets = {&target};
    models.target_ids = {"target"};
    models.target_hashes = {model_state_sha256(target)};
    GrayBoxOptions opt;
    opt.advset_dir = dir;
    EvalReport rep = run_graybox(models, test,
                                 {{"FGSM", [] {
                                       AttackSpec s;
                                       s.kind = AttackKind::fgsm;
                                       s.epsilon = 8.0 / 255.0;
                                       return s;
                                   }()},
                                  {"PGD", pgd10()}},
                                 opt);
    EXPECT_NO_THROW(rep.lookup("target", "clean"));
    EXPECT_NO_THROW(rep.lookup("target", "FGSM"));
    EXPECT_NO_THROW(rep.lookup("target", "PGD"));
    EXPECT_EQ(rep.dprime_rows.size(), 2u);
    EXPECT_EQ(rep.dprime_rows[0].statistic, "principal-axis-projection");
}

TEST(GrayBox, SecondRunIsCacheHitAndByteIdenticalReport) {
    DatasetHandle test = test_split(96, 27);
    DatasetHandle train = make_synthetic(192, 4, {3, 8, 8}, 28);
    auto surrogate = trained_toy(29, train);
    auto target = trained_toy(30, train);
    std::string dir = testing::TempDir() + "graybox_cache";
    fs::remove_all(dir);

    GrayBoxModels models;
    models.surrogate = surrogate.get();
    models.targets = {target.get()};
    models.target_ids = {"t"};
    models.target_hashes = {model_state_sha256(*target)};
    GrayBoxOptions opt;
    opt.advset_dir = dir;
    EvalReport first = run_graybox(models, test, {{"PGD", pgd10()}}, opt);
    EXPECT_TRUE(first.provenance.at("cache_hits").empty());
    EvalReport second = run_graybox(models, test, {{"PGD", pgd10()}}, opt);
    EXPECT_EQ(second.provenance.at("cache_hits").size(), 1u);
    json ja, jb;
    to_json(ja, first);
    to_json(jb, second);
    ja["provenance"].erase("cache_hits");
    jb["provenance"].erase("cache_hits");
    EXPECT_EQ(ja.dump(), jb.dump());
    // Generation disabled with a cold cache is an error.
    fs::remove_all(dir);
    opt.allow_generation = false;
    EXPECT_THROW(run_graybox(models, test, {{"PGD", pgd10()}}, opt), IoError);
}

TEST(EvalReport, JsonRoundTripAndTableLayout) {
    EvalReport rep;
    rep.attack_names = {"FGSM", "PGD", "AA-substitute (PGDx5 restarts)"};
    rep.rows = {{"target-a", "clean", 0.8722},
                {"target-a", "FGSM", 0.8314},
                {"target-a", "PGD", 0.8354},
                {"target-a", "AA-substitute (PGDx5 restarts)", 0.8419}};
    rep.dprime_rows = {{"target-a", "PGD", "principal-axis-projection", 0.1, 1.0, 0.4, 1.1, 0.28}};
    json j;
    to_json(j, rep);
    EvalReport back;
    from_json(j, back);
    EXPECT_EQ(back.rows.size(), rep.rows.size());
    EXPECT_DOUBLE_EQ(back.lookup("target-a", "PGD"), 0.8354);
    std::string table = render_table(back);
    EXPECT_NE(table.find("Clean"), std::string::npos);
    EXPECT_NE(table.find("FGSM"), std::string::npos);
    EXPECT_NE(table.find("AA-substitute"), std::string::npos);
    EXPECT_NE(table.find("87.22"), std::string::npos);
    EXPECT_NE(table.find("83.54"), std::string::npos);
    EXPECT_NE(table.find("d'"), std::string::npos);
}
