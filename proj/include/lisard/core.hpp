#pragma once
// Domain types shared by every module and the model abstraction exposing
// both penultimate-layer embeddings and class scores.

#include <array>
#include <memory>

#include "lisard/tensor.hpp"

namespace lisard {

// A batch of images in pixel space [0,1], shape B x C x H x W.
struct ImageBatch {
    Tensor data;

    ImageBatch() = default;
    explicit ImageBatch(Tensor t) : data(std::move(t)) {
        require(data.rank() == 4, "ImageBatch expects a B,C,H,W tensor, got " + data.shape_str());
    }

    long batch() const { return data.dim(0); }
    long channels() const { return data.dim(1); }
    long height() const { return data.dim(2); }
    long width() const { return data.dim(3); }

    // Elements finite and within [0,1]; B >= 1.
    void validate() const {
        require(batch() >= 1, "ImageBatch batch size must be >= 1");
        for (long i = 0; i < data.numel(); ++i) {
            float v = data[i];
            require(std::isfinite(v) && v >= 0.0f && v <= 1.0f,
                    "ImageBatch pixel out of [0,1] at flat index " + std::to_string(i));
        }
    }
};

// Integer labels, one per sample, each in [0, K).
struct LabelBatch {
    std::vector<int> labels;

    long size() const { return static_cast<long>(labels.size()); }
    int operator[](long i) const { return labels[static_cast<std::size_t>(i)]; }
};

// Penultimate-layer features, shape B x E.
struct EmbeddingBatch {
    Tensor data;

    EmbeddingBatch() = default;
    explicit EmbeddingBatch(Tensor t) : data(std::move(t)) {
        require(data.rank() == 2, "EmbeddingBatch expects a B,E tensor, got " + data.shape_str());
    }

    long batch() const { return data.dim(0); }
    long width() const { return data.dim(1); }
};

// Unnormalized class scores, shape B x K.
struct LogitBatch {
    Tensor data;

    LogitBatch() = default;
    explicit LogitBatch(Tensor t) : data(std::move(t)) {
        require(data.rank() == 2, "LogitBatch expects a B,K tensor, got " + data.shape_str());
    }

    long batch() const { return data.dim(0); }
    long classes() const { return data.dim(1); }
};

enum class Mode { train, inference };

struct ForwardResult {
    EmbeddingBatch embedding;
    LogitBatch logits;
};

// Inference-facing model interface. The embedding is exactly the tensor fed
// to the final classification layer. Evaluation code holds models through
// this interface only, so it cannot request gradients; gradient-capable
// models extend it in models.hpp.
class ClassifierModel {
public:
    virtual ~ClassifierModel() = default;

    virtual void set_mode(Mode m) = 0;
    virtual Mode mode() const = 0;

    virtual long num_classes() const = 0;
    virtual long embedding_width() const = 0;
    virtual std::array<long, 3> input_spec() const = 0;  // C,H,W

    virtual ForwardResult forward_full(const ImageBatch& x) = 0;
};

inline void check_input_shape(const ClassifierModel& model, const ImageBatch& x) {
    auto spec = model.input_spec();
    require(x.channels() == spec[0] && x.height() == spec[1] && x.width() == spec[2],
            "input shape " + x.data.shape_str() + " does not match model input spec");
}

// Per-sample argmax over logits; ties broken by the lowest class index.
inline LabelBatch predict_classes(ClassifierModel& model, const ImageBatch& x) {
    require(model.mode() == Mode::inference, "predict_classes requires inference mode");
    check_input_shape(model, x);
    ForwardResult out = model.forward_full(x);
    const Tensor& logits = out.logits.data;
    LabelBatch pred;
    pred.labels.resize(static_cast<std::size_t>(logits.dim(0)));
    for (long b = 0; b < logits.dim(0); ++b) {
        int best = 0;
        float best_v = logits.at(b, 0);
        for (long k = 1; k < logits.dim(1); ++k) {
            float v = logits.at(b, k);
            if (v > best_v) {
                best_v = v;
                best = static_cast<int>(k);
            }
        }
        pred.labels[static_cast<std::size_t>(b)] = best;
    }
    return pred;
}

inline LabelBatch argmax_classes(const LogitBatch& logits) {
    LabelBatch pred;
    pred.labels.resize(static_cast<std::size_t>(logits.batch()));
    for (long b = 0; b < logits.batch(); ++b) {
        int best = 0;
        float best_v = logits.data.at(b, 0);
        for (long k = 1; k < logits.classes(); ++k) {
            float v = logits.data.at(b, k);
            if (v > best_v) {
                best_v = v;
                best = static_cast<int>(k);
            }
        }
        pred.labels[static_cast<std::size_t>(b)] = best;
    }
    return pred;
}

// Fraction of exact label matches.
inline double accuracy(const LabelBatch& pred, const LabelBatch& truth) {
    require(pred.size() == truth.size(), "accuracy: length mismatch");
    require(pred.size() > 0, "accuracy: empty batches");
    long hits = 0;
    for (long i = 0; i < pred.size(); ++i) {
        if (pred[i] == truth[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace lisard
