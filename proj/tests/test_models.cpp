#include <gtest/gtest.h>

#include "lisard/models.hpp"

using namespace lisard;

namespace {

ImageBatch random_images(long batch, std::array<long, 3> spec, std::uint64_t seed) {
    Tensor t({batch, spec[0], spec[1], spec[2]});
    RngStream rng(seed);
    for (long i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform01());
    return ImageBatch(std::move(t));
}

}  // namespace

TEST(Registry, BuildIsSeedDeterministic) {
    BackboneSpec spec{"resnet18", 10, {3, 32, 32}, 0};
    auto a = build(spec);
    auto b = build(spec);
    a->set_mode(Mode::inference);
    b->set_mode(Mode::inference);
    ImageBatch x = random_images(2, spec.input_spec, 1);
    ForwardResult ra = a->forward_full(x);
    ForwardResult rb = b->forward_full(x);
    EXPECT_TRUE(bitwise_equal(ra.logits.data, rb.logits.data));
}

TEST(Registry, ToycnnShapeContract) {
    BackboneSpec spec{"toycnn", 10, {3, 8, 8}, 0};
    auto model = build(spec);
    model->set_mode(Mode::inference);
    ForwardResult out = model->forward_full(random_images(4, spec.input_spec, 2));
    EXPECT_EQ(out.embedding.data.shape(), (std::vector<long>{4, model->embedding_width()}));
    EXPECT_EQ(out.logits.data.shape(), (std::vector<long>{4, 10}));
    EXPECT_EQ(model->embedding_width(), 64);
}

TEST(Registry, UnknownNameListsKnownBackbones) {
    BackboneSpec spec{"inceptionv3", 10, {3, 32, 32}, 0};
    try {
        build(spec);
        FAIL() << "expected RegistryError";
    } catch (const RegistryError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("inceptionv3"), std::string::npos);
        EXPECT_NE(msg.find("resnet18"), std::string::npos);
        EXPECT_NE(msg.find("toycnn"), std::string::npos);
    }
}

TEST(Registry, DeclaredEmbeddingWidths) {
    struct Case {
        const char* name;
        long e32;  // embedding width at 3x32x32
    };
    const Case cases[] = {{"toycnn", 64},          {"resnet18", 512},
                          {"resnet50", 2048},      {"wideresnet28-10", 640},
                          {"vgg19", 512},          {"mobilenetv2", 1280},
                          {"efficientnetb2", 1408}};
    for (const Case& c : cases) {
        BackboneSpec spec{c.name, 10, {3, 32, 32}, 0};
        auto model = build(spec);
        EXPECT_EQ(model->embedding_width(), c.e32) << c.name;
    }
}

TEST(Registry, EveryBackboneForwardShapes) {
    for (const std::string& name : registered_backbones()) {
        // resnet101 is exercised separately; keep this sweep quick.
        if (name == "resnet101") continue;
        BackboneSpec spec{name, 7, {3, 32, 32}, 3};
        auto model = build(spec);
        model->set_mode(Mode::inference);
        ForwardResult out = model->forward_full(random_images(2, spec.input_spec, 4));
        EXPECT_EQ(out.embedding.data.dim(0), 2) << name;
        EXPECT_EQ(out.embedding.data.dim(1), model->embedding_width()) << name;
        EXPECT_EQ(out.logits.data.shape(), (std::vector<long>{2, 7})) << name;
        EXPECT_TRUE(out.logits.data.all_finite()) << name;
    }
}

TEST(Registry, Resnet101BuildsWithBottleneckWidth) {
    BackboneSpec spec{"resnet101", 10, {3, 32, 32}, 0};
    auto model = build(spec);
    EXPECT_EQ(model->embedding_width(), 2048);
}

TEST(Registry, SixtyFourPixelInputs) {
    BackboneSpec spec{"resnet18", 200, {3, 64, 64}, 0};
    auto model = build(spec);
    model->set_mode(Mode::inference);
    ForwardResult out = model->forward_full(random_images(2, spec.input_spec, 5));
    EXPECT_EQ(out.embedding.data.dim(1), 512);
    EXPECT_EQ(out.logits.data.dim(1), 200);
}

TEST(Model, BackwardProducesFiniteGradientsAcrossBlockTypes) {
    // One taped forward/backward per backbone family exercises the
    // residual, bottleneck, pre-activation, depthwise and SE paths.
    for (const char* name : {"resnet18", "resnet50", "wideresnet28-10", "vgg19", "mobilenetv2",
                             "efficientnetb2"}) {
        BackboneSpec spec{name, 5, {3, 32, 32}, 11};
        auto model = build(spec);
        model->set_mode(Mode::train);
        ImageBatch x = random_images(2, spec.input_spec, 13);
        LabelBatch y{{1, 3}};
        Tape tape;
        ForwardResult out = model->forward_full_taped(x, tape);
        Tensor glogits;
        cross_entropy_with_grad(out.logits.data, y, glogits);
        model->zero_grad();
        Tensor gx = model->backward_full(glogits, Tensor(), tape);
        EXPECT_TRUE(gx.all_finite()) << name;
        EXPECT_TRUE(gx.same_shape(x.data)) << name;
        double grad_norm = 0.0;
        for (Param* p : model->params()) {
            ASSERT_TRUE(p->grad.all_finite()) << name << " param " << p->name;
            for (long i = 0; i < p->grad.numel(); ++i) grad_norm += std::abs(p->grad[i]);
        }
        EXPECT_GT(grad_norm, 0.0) << name;
    }
}

TEST(Model, InferenceForwardIsPure) {
    BackboneSpec spec{"toycnn", 10, {3, 16, 16}, 9};
    auto model = build(spec);
    model->set_mode(Mode::inference);
    ImageBatch x = random_images(3, spec.input_spec, 6);
    ForwardResult a = model->forward_full(x);
    ForwardResult b = model->forward_full(x);
    EXPECT_TRUE(bitwise_equal(a.logits.data, b.logits.data));
    EXPECT_TRUE(bitwise_equal(a.embedding.data, b.embedding.data));
}

TEST(Model, TrainModeUpdatesRunningStatsInferenceDoesNot) {
    BackboneSpec spec{"toycnn", 10, {3, 8, 8}, 9};
    auto model = build(spec);
    ImageBatch x = random_images(4, spec.input_spec, 7);
    model->set_mode(Mode::inference);
    std::string before = model_state_sha256(*model);
    model->forward_full(x);
    EXPECT_EQ(model_state_sha256(*model), before);
    model->set_mode(Mode::train);
    model->forward_full(x);
    EXPECT_NE(model_state_sha256(*model), before);
}

TEST(Model, EmbeddingIsExactlyTheHeadInput) {
    // Embedding must be the tensor fed to the final linear layer: logits
    // reproduce as head(W, b) applied to the returned embedding.
    BackboneSpec spec{"toycnn", 5, {3, 8, 8}, 12};
    auto model = build(spec);
    model->set_mode(Mode::inference);
    ForwardResult out = model->forward_full(random_images(3, spec.input_spec, 8));
    NamedState st = model->state();
    const Tensor* w = nullptr;
    const Tensor* b = nullptr;
    for (auto& [name, t] : st) {
        if (name == "head.weight") w = t;
        if (name == "head.bias") b = t;
    }
    ASSERT_NE(w, nullptr);
    ASSERT_NE(b, nullptr);
    const long e = model->embedding_width();
    for (long r = 0; r < 3; ++r) {
        for (long k = 0; k < 5; ++k) {
            double acc = (*b)[k];
            for (long i = 0; i < e; ++i) acc += (*w).at(k, i) * out.embedding.data.at(r, i);
            EXPECT_NEAR(out.logits.data.at(r, k), acc, 1e-4);
        }
    }
}

TEST(WeightIo, RoundTripPreservesLogitsBitwise) {
    BackboneSpec spec{"toycnn", 10, {3, 8, 8}, 77};
    auto model = build(spec);
    model->set_mode(Mode::train);
    model->forward_full(random_images(4, spec.input_spec, 9));  // move running stats
    model->set_mode(Mode::inference);
    ImageBatch probe = random_images(4, spec.input_spec, 10);
    ForwardResult before = model->forward_full(probe);

    std::string path = testing::TempDir() + "lisard_weights_rt.wt";
    save_weights(*model, path, "cfg-hash");
    auto loaded = load_weights(path, &spec);
    loaded->set_mode(Mode::inference);
    ForwardResult after = loaded->forward_full(probe);
    EXPECT_TRUE(bitwise_equal(before.logits.data, after.logits.data));
    EXPECT_TRUE(bitwise_equal(before.embedding.data, after.embedding.data));
    EXPECT_EQ(model_state_sha256(*model), model_state_sha256(*loaded));
}

TEST(WeightIo, WrongClassCountIsLoadError) {
    BackboneSpec spec{"toycnn", 10, {3, 8, 8}, 1};
    auto model = build(spec);
    std::string path = testing::TempDir() + "lisard_weights_k.wt";
    save_weights(*model, path);
    BackboneSpec wrong = spec;
    wrong.num_classes = 7;
    EXPECT_THROW(load_weights(path, &wrong), IoError);
}

TEST(WeightIo, CorruptedFileFailsChecksum) {
    BackboneSpec spec{"toycnn", 10, {3, 8, 8}, 2};
    auto model = build(spec);
    std::string path = testing::TempDir() + "lisard_weights_c.wt";
    save_weights(*model, path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(256);
        char junk = 0x5a;
        f.write(&junk, 1);
    }
    EXPECT_THROW(load_weights(path), IoError);
}

TEST(WeightIo, ChecksumMatchesManifest) {
    BackboneSpec spec{"toycnn", 10, {3, 8, 8}, 3};
    auto model = build(spec);
    std::string path = testing::TempDir() + "lisard_weights_m.wt";
    save_weights(*model, path);
    EXPECT_EQ(weights_checksum(path), sha256_file_hex(path));
}
