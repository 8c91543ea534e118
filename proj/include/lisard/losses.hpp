#pragma once
// Loss mathematics for similarity-regularized training: classification
// cross-entropy, the batch cross-correlation matrix between clean and
// perturbed embeddings, the redundancy-reduction similarity loss with its
// analytic gradients, the per-epoch alpha ramp and the composite weighting.

#include "lisard/core.hpp"

namespace lisard {

// Weights of the composite objective.
struct LossWeights {
    double lambda_ = 5e-3;  // off-diagonal weight
    double tau = 2.0;       // temperature dividing the similarity term
    double alpha0 = 0.5;    // starting classification weight
    double delta = 1.0 / 400.0;  // per-epoch increment of alpha

    void validate() const {
        require(lambda_ > 0.0, "LossWeights: lambda must be > 0");
        require(tau > 0.0, "LossWeights: tau must be > 0");
        require(alpha0 >= 0.0 && alpha0 <= 1.0, "LossWeights: alpha0 must be in [0,1]");
        require(delta >= 0.0, "LossWeights: delta must be >= 0");
    }
};

// E x E matrix of per-dimension batch correlations between two embedding
// batches. Entries lie in [-1,1] up to floating-point slack.
struct CrossCorrMatrix {
    MatrixD m;

    long size() const { return m.rows(); }

    void validate() const {
        for (long i = 0; i < m.rows(); ++i) {
            for (long j = 0; j < m.cols(); ++j) {
                double v = m(i, j);
                require(std::isfinite(v) && v >= -1.0 - 1e-6 && v <= 1.0 + 1e-6,
                        "cross-correlation entry out of [-1,1]");
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Cross-entropy

// Mean over the batch of -log softmax(logits)[label]. Log-sum-exp is
// evaluated in double with max subtraction.
inline double cross_entropy(const MatrixD& logits, const LabelBatch& y) {
    require(logits.rows() == y.size(), "cross_entropy: batch size mismatch");
    require(logits.rows() >= 1, "cross_entropy: empty batch");
    double total = 0.0;
    for (long b = 0; b < logits.rows(); ++b) {
        int label = y[b];
        require(label >= 0 && label < logits.cols(), "cross_entropy: label out of range");
        double m = logits.row(b).maxCoeff();
        require(std::isfinite(m), "cross_entropy: non-finite logits");
        double sum = 0.0;
        for (long k = 0; k < logits.cols(); ++k) sum += std::exp(logits(b, k) - m);
        total += m + std::log(sum) - logits(b, label);
    }
    return total / static_cast<double>(logits.rows());
}

inline MatrixD to_double(const Tensor& t, long rows, long cols) {
    auto map = t.mat(rows, cols);
    return map.cast<double>();
}

inline double cross_entropy(const LogitBatch& logits, const LabelBatch& y) {
    require(logits.data.all_finite(), "cross_entropy: non-finite logits");
    return cross_entropy(to_double(logits.data, logits.batch(), logits.classes()), y);
}

// Mean-reduced gradient (softmax - onehot) / B, written into glogits (float).
inline double cross_entropy_with_grad(const Tensor& logits, const LabelBatch& y, Tensor& glogits) {
    const long batch = logits.dim(0);
    const long classes = logits.dim(1);
    require(batch == y.size(), "cross_entropy: batch size mismatch");
    glogits = Tensor({batch, classes});
    double total = 0.0;
    for (long b = 0; b < batch; ++b) {
        int label = y[b];
        require(label >= 0 && label < classes, "cross_entropy: label out of range");
        double m = -1e300;
        for (long k = 0; k < classes; ++k) m = std::max(m, static_cast<double>(logits.at(b, k)));
        require(std::isfinite(m), "cross_entropy: non-finite logits");
        double sum = 0.0;
        for (long k = 0; k < classes; ++k) sum += std::exp(static_cast<double>(logits.at(b, k)) - m);
        total += m + std::log(sum) - static_cast<double>(logits.at(b, label));
        for (long k = 0; k < classes; ++k) {
            double p = std::exp(static_cast<double>(logits.at(b, k)) - m) / sum;
            double g = p - (k == label ? 1.0 : 0.0);
            glogits.at(b, k) = static_cast<float>(g / static_cast<double>(batch));
        }
    }
    return total / static_cast<double>(batch);
}

// Per-sample losses, used to pick the strongest restart in multi-restart
// attacks.
inline std::vector<double> cross_entropy_per_sample(const Tensor& logits, const LabelBatch& y) {
    const long batch = logits.dim(0);
    const long classes = logits.dim(1);
    require(batch == y.size(), "cross_entropy: batch size mismatch");
    std::vector<double> out(static_cast<std::size_t>(batch));
    for (long b = 0; b < batch; ++b) {
        double m = -1e300;
        for (long k = 0; k < classes; ++k) m = std::max(m, static_cast<double>(logits.at(b, k)));
        double sum = 0.0;
        for (long k = 0; k < classes; ++k) sum += std::exp(static_cast<double>(logits.at(b, k)) - m);
        out[static_cast<std::size_t>(b)] =
            m + std::log(sum) - static_cast<double>(logits.at(b, y[b]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cross-correlation matrix and similarity loss

constexpr double kCorrDenomGuard = 1e-12;

// M_ij = sum_b zA[b,i] zB[b,j] / (||zA[:,i]|| ||zB[:,j]||), each column norm
// guarded below by kCorrDenomGuard. Columns are not mean-centered.
inline CrossCorrMatrix cross_correlation(const MatrixD& za, const MatrixD& zb) {
    require(za.rows() == zb.rows() && za.cols() == zb.cols(),
            "cross_correlation: shape mismatch");
    require(za.rows() >= 2, "cross_correlation: batch size must be >= 2");
    Eigen::VectorXd na = za.colwise().norm().cwiseMax(kCorrDenomGuard);
    Eigen::VectorXd nb = zb.colwise().norm().cwiseMax(kCorrDenomGuard);
    CrossCorrMatrix out;
    out.m = (za.transpose() * zb).array() /
            (na * nb.transpose()).array();
    return out;
}

inline CrossCorrMatrix cross_correlation(const EmbeddingBatch& za, const EmbeddingBatch& zb) {
    require(za.batch() == zb.batch() && za.width() == zb.width(),
            "cross_correlation: shape mismatch");
    return cross_correlation(to_double(za.data, za.batch(), za.width()),
                             to_double(zb.data, zb.batch(), zb.width()));
}

// L_S = sum_i (1 - M_ii)^2 + lambda * sum_{i != j} M_ij^2.
inline double similarity_loss(const CrossCorrMatrix& m, double lambda) {
    double on_diag = 0.0, off_diag = 0.0;
    for (long i = 0; i < m.m.rows(); ++i) {
        for (long j = 0; j < m.m.cols(); ++j) {
            if (i == j) {
                double d = 1.0 - m.m(i, i);
                on_diag += d * d;
            } else {
                off_diag += m.m(i, j) * m.m(i, j);
            }
        }
    }
    return on_diag + lambda * off_diag;
}

// Analytic gradient of the similarity loss through the cross-correlation
// matrix with respect to both embedding batches. Where a column norm hits
// the guard, the norm is treated as constant.
struct SimilarityGrad {
    double loss = 0.0;
    MatrixD dza;
    MatrixD dzb;
};

inline SimilarityGrad similarity_loss_grad(const MatrixD& za, const MatrixD& zb, double lambda) {
    require(za.rows() == zb.rows() && za.cols() == zb.cols(),
            "similarity_loss_grad: shape mismatch");
    require(za.rows() >= 2, "similarity_loss_grad: batch size must be >= 2");
    const long e = za.cols();

    Eigen::VectorXd na_raw = za.colwise().norm();
    Eigen::VectorXd nb_raw = zb.colwise().norm();
    Eigen::VectorXd na = na_raw.cwiseMax(kCorrDenomGuard);
    Eigen::VectorXd nb = nb_raw.cwiseMax(kCorrDenomGuard);

    MatrixD corr = (za.transpose() * zb).array() / (na * nb.transpose()).array();

    // dL/dM
    MatrixD g = 2.0 * lambda * corr;
    double loss = 0.0;
    for (long i = 0; i < e; ++i) {
        double d = 1.0 - corr(i, i);
        loss += d * d;
        g(i, i) = -2.0 * d;
    }
    for (long i = 0; i < e; ++i) {
        for (long j = 0; j < e; ++j) {
            if (i != j) loss += lambda * corr(i, j) * corr(i, j);
        }
    }

    // dL/dS term, S = za^T zb
    MatrixD p = g.array() / (na * nb.transpose()).array();

    // Norm terms: c_i = sum_j G_ij M_ij (rows), d_j = sum_i G_ij M_ij (cols).
    Eigen::VectorXd row_gm = (g.array() * corr.array()).rowwise().sum();
    Eigen::VectorXd col_gm = (g.array() * corr.array()).colwise().sum();

    SimilarityGrad out;
    out.loss = loss;
    out.dza = zb * p.transpose();
    out.dzb = za * p;
    for (long i = 0; i < e; ++i) {
        if (na_raw(i) > kCorrDenomGuard) {
            out.dza.col(i) -= za.col(i) * (row_gm(i) / (na(i) * na(i)));
        }
    }
    for (long j = 0; j < e; ++j) {
        if (nb_raw(j) > kCorrDenomGuard) {
            out.dzb.col(j) -= zb.col(j) * (col_gm(j) / (nb(j) * nb(j)));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Schedules and composite weighting

// alpha = min(1, alpha0 + delta * (epoch - 1)); epochs are 1-based and alpha
// is constant within an epoch.
inline double alpha_at(long epoch, const LossWeights& w) {
    require(epoch >= 1, "alpha_at: epoch must be >= 1");
    return std::min(1.0, w.alpha0 + w.delta * static_cast<double>(epoch - 1));
}

// L = alpha * (L_C + L_R) + (1 - alpha) * (L_S / tau).
inline double composite_loss(double l_c, double l_r, double l_s, double alpha, double tau) {
    require(tau > 0.0, "composite_loss: tau must be > 0");
    require(alpha >= 0.0 && alpha <= 1.0, "composite_loss: alpha must be in [0,1]");
    return alpha * (l_c + l_r) + (1.0 - alpha) * (l_s / tau);
}

}  // namespace lisard
