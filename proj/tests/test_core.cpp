#include <gtest/gtest.h>

#include "lisard/core.hpp"

using namespace lisard;

namespace {

// Returns canned logits regardless of input; embeddings are the logits.
class FixedLogitModel : public ClassifierModel {
public:
    explicit FixedLogitModel(Tensor logits) : logits_(std::move(logits)) {}

    void set_mode(Mode m) override { mode_ = m; }
    Mode mode() const override { return mode_; }
    long num_classes() const override { return logits_.dim(1); }
    long embedding_width() const override { return logits_.dim(1); }
    std::array<long, 3> input_spec() const override { return {1, 1, 1}; }

    ForwardResult forward_full(const ImageBatch&) override {
        return {EmbeddingBatch(logits_), LogitBatch(logits_)};
    }

private:
    Tensor logits_;
    Mode mode_ = Mode::inference;
};

ImageBatch dummy_input(long batch) { return ImageBatch(Tensor({batch, 1, 1, 1})); }

}  // namespace

TEST(PredictClasses, ArgmaxRow) {
    FixedLogitModel model(Tensor::from_vector({1, 3}, {0.1f, 3.0f, -1.0f}));
    LabelBatch pred = predict_classes(model, dummy_input(1));
    EXPECT_EQ(pred[0], 1);
}

TEST(PredictClasses, TieBreaksToLowestIndex) {
    FixedLogitModel model(Tensor::from_vector({1, 3}, {2.0f, 2.0f, 0.0f}));
    LabelBatch pred = predict_classes(model, dummy_input(1));
    EXPECT_EQ(pred[0], 0);
}

TEST(PredictClasses, BatchOfTwo) {
    FixedLogitModel model(Tensor::from_vector({2, 2}, {0.0f, 1.0f, 1.0f, 0.0f}));
    LabelBatch pred = predict_classes(model, dummy_input(2));
    ASSERT_EQ(pred.size(), 2);
    EXPECT_EQ(pred[0], 1);
    EXPECT_EQ(pred[1], 0);
}

TEST(PredictClasses, RequiresInferenceMode) {
    FixedLogitModel model(Tensor::from_vector({1, 2}, {0.0f, 1.0f}));
    model.set_mode(Mode::train);
    EXPECT_THROW(predict_classes(model, dummy_input(1)), ContractError);
}

TEST(PredictClasses, InvariantUnderMonotoneRowTransform) {
    Tensor logits = Tensor::from_vector({3, 4}, {0.3f, -1.0f, 2.0f, 0.0f,  //
                                                 5.0f, 4.0f, 4.9f, -2.0f,  //
                                                 0.0f, 0.0f, -0.1f, 0.2f});
    Tensor warped(logits.shape());
    for (long b = 0; b < 3; ++b) {
        for (long k = 0; k < 4; ++k) {
            warped.at(b, k) = 3.0f * std::tanh(logits.at(b, k)) + 1.0f;
        }
    }
    FixedLogitModel m1(logits), m2(warped);
    EXPECT_EQ(predict_classes(m1, dummy_input(3)).labels,
              predict_classes(m2, dummy_input(3)).labels);
}

TEST(Accuracy, ExactMatchFraction) {
    EXPECT_DOUBLE_EQ(accuracy(LabelBatch{{1, 2, 3}}, LabelBatch{{1, 2, 3}}), 1.0);
    EXPECT_DOUBLE_EQ(accuracy(LabelBatch{{1, 2, 3}}, LabelBatch{{0, 0, 0}}), 0.0);
    EXPECT_DOUBLE_EQ(accuracy(LabelBatch{{1, 0}}, LabelBatch{{1, 1}}), 0.5);
}

TEST(Accuracy, LengthMismatchIsContractViolation) {
    EXPECT_THROW(accuracy(LabelBatch{{1}}, LabelBatch{{1, 2}}), ContractError);
}

TEST(ImageBatchType, ValidatesRangeAndShape) {
    EXPECT_THROW(ImageBatch(Tensor({2, 3})), ContractError);
    ImageBatch ok(Tensor::full({1, 1, 2, 2}, 0.5f));
    EXPECT_NO_THROW(ok.validate());
    ImageBatch bad(Tensor::full({1, 1, 2, 2}, 1.5f));
    EXPECT_THROW(bad.validate(), ContractError);
}

TEST(TensorType, MatViewAndBitwiseEqual) {
    Tensor t = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
    auto m = t.mat(2, 3);
    EXPECT_FLOAT_EQ(m(1, 2), 6.0f);
    Tensor u = t;
    EXPECT_TRUE(bitwise_equal(t, u));
    u.at(0, 0) = 9.0f;
    EXPECT_FALSE(bitwise_equal(t, u));
    EXPECT_THROW(t.mat(3, 3), ContractError);
}
