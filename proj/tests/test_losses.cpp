// Loss math against independent brute-force oracles. The oracles live here
// in test code and never share a code path with the implementation.

#include <gtest/gtest.h>

#include "lisard/losses.hpp"

using namespace lisard;

namespace {

MatrixD random_matrix(long rows, long cols, std::uint64_t seed, double scale = 1.0) {
    RngStream rng(seed);
    MatrixD m(rows, cols);
    for (long r = 0; r < rows; ++r) {
        for (long c = 0; c < cols; ++c) m(r, c) = rng.normal() * scale;
    }
    return m;
}

// Naive double-loop evaluation of the cross-correlation formula.
MatrixD oracle_cross_correlation(const MatrixD& za, const MatrixD& zb) {
    const long batch = za.rows(), e = za.cols();
    MatrixD m(e, e);
    for (long i = 0; i < e; ++i) {
        for (long j = 0; j < e; ++j) {
            double num = 0.0, da = 0.0, db = 0.0;
            for (long b = 0; b < batch; ++b) {
                num += za(b, i) * zb(b, j);
                da += za(b, i) * za(b, i);
                db += zb(b, j) * zb(b, j);
            }
            m(i, j) = num / (std::max(std::sqrt(da), 1e-12) * std::max(std::sqrt(db), 1e-12));
        }
    }
    return m;
}

// Elementwise summation of the similarity objective.
double oracle_similarity_loss(const MatrixD& m, double lambda) {
    double total = 0.0;
    for (long i = 0; i < m.rows(); ++i) {
        for (long j = 0; j < m.cols(); ++j) {
            if (i == j) {
                total += (1.0 - m(i, i)) * (1.0 - m(i, i));
            } else {
                total += lambda * m(i, j) * m(i, j);
            }
        }
    }
    return total;
}

// Direct softmax + log summation.
double oracle_cross_entropy(const MatrixD& logits, const LabelBatch& y) {
    double total = 0.0;
    for (long b = 0; b < logits.rows(); ++b) {
        double denom = 0.0;
        for (long k = 0; k < logits.cols(); ++k) denom += std::exp(logits(b, k));
        double p = std::exp(logits(b, y[b])) / denom;
        total += -std::log(p);
    }
    return total / static_cast<double>(logits.rows());
}

double similarity_of(const MatrixD& za, const MatrixD& zb, double lambda) {
    return similarity_loss(cross_correlation(za, zb), lambda);
}

}  // namespace

TEST(CrossEntropy, UniformLogitsGiveLogK) {
    MatrixD logits = MatrixD::Zero(4, 10);
    LabelBatch y{{0, 3, 7, 9}};
    EXPECT_NEAR(cross_entropy(logits, y), std::log(10.0), 1e-12);
}

TEST(CrossEntropy, ConfidentCorrectLogitsNearZero) {
    MatrixD logits = MatrixD::Zero(2, 5);
    logits(0, 2) = 20.0;
    logits(1, 4) = 20.0;
    LabelBatch y{{2, 4}};
    EXPECT_LT(cross_entropy(logits, y), 1e-8);
}

TEST(CrossEntropy, MatchesDirectSummationOracle) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        MatrixD logits = random_matrix(8, 10, 100 + seed, 3.0);
        LabelBatch y;
        RngStream rng(seed);
        for (int b = 0; b < 8; ++b) y.labels.push_back(static_cast<int>(rng.below(10)));
        EXPECT_NEAR(cross_entropy(logits, y), oracle_cross_entropy(logits, y), 1e-6);
    }
}

TEST(CrossEntropy, GradientMatchesSoftmaxMinusOnehot) {
    MatrixD logits_d = random_matrix(6, 4, 77, 2.0);
    Tensor logits({6, 4});
    for (long b = 0; b < 6; ++b) {
        for (long k = 0; k < 4; ++k) logits.at(b, k) = static_cast<float>(logits_d(b, k));
    }
    LabelBatch y{{0, 1, 2, 3, 0, 1}};
    Tensor grad;
    double loss = cross_entropy_with_grad(logits, y, grad);
    EXPECT_NEAR(loss, oracle_cross_entropy(to_double(logits, 6, 4), y), 1e-6);
    for (long b = 0; b < 6; ++b) {
        double denom = 0.0;
        for (long k = 0; k < 4; ++k) denom += std::exp(static_cast<double>(logits.at(b, k)));
        for (long k = 0; k < 4; ++k) {
            double p = std::exp(static_cast<double>(logits.at(b, k))) / denom;
            double expect = (p - (y[b] == k ? 1.0 : 0.0)) / 6.0;
            EXPECT_NEAR(grad.at(b, k), expect, 1e-6);
        }
    }
}

TEST(CrossEntropy, NonFiniteLogitsRejected) {
    Tensor logits({1, 3});
    logits.at(0, 1) = std::numeric_limits<float>::quiet_NaN();
    LogitBatch lb(logits);
    LabelBatch y{{0}};
    EXPECT_THROW(cross_entropy(lb, y), ContractError);
}

TEST(CrossCorrelation, SelfCorrelationHasUnitDiagonal) {
    MatrixD za = random_matrix(16, 8, 3);
    CrossCorrMatrix m = cross_correlation(za, za);
    for (long i = 0; i < 8; ++i) {
        EXPECT_NEAR(m.m(i, i), 1.0, 1e-6);
        for (long j = 0; j < 8; ++j) EXPECT_NEAR(m.m(i, j), m.m(j, i), 1e-9);
    }
    m.validate();
}

TEST(CrossCorrelation, OrthogonalColumnsGiveZero) {
    MatrixD za = MatrixD::Zero(4, 2);
    MatrixD zb = MatrixD::Zero(4, 2);
    za(0, 0) = 1.0;
    za(1, 0) = 1.0;
    zb(2, 1) = 1.0;
    zb(3, 1) = -1.0;
    za.col(1) = za.col(0);
    zb.col(0) = zb.col(1);
    CrossCorrMatrix m = cross_correlation(za, zb);
    EXPECT_NEAR(m.m(0, 0), 0.0, 1e-6);
    EXPECT_NEAR(m.m(0, 1), 0.0, 1e-6);
}

TEST(CrossCorrelation, MatchesBruteForceOracle) {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        MatrixD za = random_matrix(16, 8, 1000 + seed);
        MatrixD zb = random_matrix(16, 8, 2000 + seed);
        CrossCorrMatrix m = cross_correlation(za, zb);
        MatrixD want = oracle_cross_correlation(za, zb);
        EXPECT_LT((m.m - want).cwiseAbs().maxCoeff(), 1e-6);
        m.validate();
    }
}

TEST(CrossCorrelation, ColumnScaleInvariance) {
    MatrixD za = random_matrix(16, 8, 5);
    MatrixD zb = random_matrix(16, 8, 6);
    CrossCorrMatrix base = cross_correlation(za, zb);
    MatrixD scaled = za;
    scaled.col(3) *= 37.5;
    CrossCorrMatrix after = cross_correlation(scaled, zb);
    EXPECT_LT((base.m - after.m).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(CrossCorrelation, RejectsShapeMismatchAndTinyBatch) {
    MatrixD a = random_matrix(4, 3, 1);
    MatrixD b = random_matrix(4, 2, 2);
    EXPECT_THROW(cross_correlation(a, b), ContractError);
    MatrixD c = random_matrix(1, 3, 3);
    EXPECT_THROW(cross_correlation(c, c), ContractError);
}

TEST(SimilarityLoss, IdentityMatrixGivesZero) {
    CrossCorrMatrix m;
    m.m = MatrixD::Identity(8, 8);
    EXPECT_DOUBLE_EQ(similarity_loss(m, 5e-3), 0.0);
}

TEST(SimilarityLoss, AllZerosCountsDiagonalOnly) {
    CrossCorrMatrix m;
    m.m = MatrixD::Zero(8, 8);
    EXPECT_DOUBLE_EQ(similarity_loss(m, 1.0), 8.0);
}

TEST(SimilarityLoss, MatchesElementwiseOracle) {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        CrossCorrMatrix m;
        m.m = random_matrix(8, 8, 3000 + seed, 0.3);
        EXPECT_NEAR(similarity_loss(m, 5e-3), oracle_similarity_loss(m.m, 5e-3), 1e-9);
    }
}

TEST(SimilarityLoss, ZeroOnlyAtIdentity) {
    CrossCorrMatrix m;
    m.m = MatrixD::Identity(6, 6);
    m.m(2, 4) = 0.01;
    EXPECT_GT(similarity_loss(m, 5e-3), 0.0);
    m.m = MatrixD::Identity(6, 6);
    m.m(3, 3) = 0.999;
    EXPECT_GT(similarity_loss(m, 5e-3), 0.0);
}

TEST(SimilarityGrad, MatchesCentralFiniteDifferences) {
    const double h = 1e-4;
    const double lambda = 5e-3;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        MatrixD za = random_matrix(16, 8, 4000 + seed);
        MatrixD zb = random_matrix(16, 8, 5000 + seed);
        SimilarityGrad g = similarity_loss_grad(za, zb, lambda);
        EXPECT_NEAR(g.loss, similarity_of(za, zb, lambda), 1e-9);
        for (long r = 0; r < 16; r += 5) {
            for (long c = 0; c < 8; c += 3) {
                MatrixD zp = za, zm = za;
                zp(r, c) += h;
                zm(r, c) -= h;
                double fd = (similarity_of(zp, zb, lambda) - similarity_of(zm, zb, lambda)) /
                            (2.0 * h);
                double denom = std::max(std::abs(fd), 1e-8);
                EXPECT_LT(std::abs(g.dza(r, c) - fd) / denom, 1e-3)
                    << "dza mismatch at (" << r << "," << c << ")";
                zp = zb;
                zm = zb;
                zp(r, c) += h;
                zm(r, c) -= h;
                fd = (similarity_of(za, zp, lambda) - similarity_of(za, zm, lambda)) / (2.0 * h);
                denom = std::max(std::abs(fd), 1e-8);
                EXPECT_LT(std::abs(g.dzb(r, c) - fd) / denom, 1e-3)
                    << "dzb mismatch at (" << r << "," << c << ")";
            }
        }
    }
}

TEST(SimilarityGrad, GuardedDeadDimensionStaysFinite) {
    MatrixD za = random_matrix(8, 4, 11);
    MatrixD zb = random_matrix(8, 4, 12);
    za.col(2).setZero();
    SimilarityGrad g = similarity_loss_grad(za, zb, 5e-3);
    EXPECT_TRUE(g.dza.allFinite());
    EXPECT_TRUE(g.dzb.allFinite());
    CrossCorrMatrix m = cross_correlation(za, zb);
    EXPECT_TRUE(m.m.allFinite());
}

TEST(AlphaSchedule, PaperValuesAndClamp) {
    LossWeights w;
    w.alpha0 = 0.5;
    w.delta = 1.0 / 400.0;
    EXPECT_DOUBLE_EQ(alpha_at(1, w), 0.5);
    EXPECT_DOUBLE_EQ(alpha_at(200, w), 0.5 + 199.0 / 400.0);
    EXPECT_DOUBLE_EQ(alpha_at(500, w), 1.0);
    EXPECT_THROW(alpha_at(0, w), ContractError);
}

TEST(AlphaSchedule, MonotoneAndBounded) {
    LossWeights w;
    w.alpha0 = 0.3;
    w.delta = 0.01;
    double prev = 0.0;
    for (long e = 1; e <= 1000; ++e) {
        double a = alpha_at(e, w);
        EXPECT_GE(a, prev);
        EXPECT_LE(a, 1.0);
        EXPECT_GE(a, w.alpha0);
        prev = a;
    }
}

TEST(CompositeLoss, DegenerateWeights) {
    EXPECT_DOUBLE_EQ(composite_loss(1.5, 2.5, 99.0, 1.0, 0.1), 4.0);
    EXPECT_DOUBLE_EQ(composite_loss(2.0, 2.0, 4.0, 0.5, 2.0), 3.0);
    EXPECT_DOUBLE_EQ(composite_loss(5.0, 5.0, 0.0, 0.0, 1.0), 0.0);
}

TEST(CompositeLoss, MonotoneInEachTerm) {
    const double base = composite_loss(1.0, 1.0, 1.0, 0.5, 2.0);
    EXPECT_GE(composite_loss(1.1, 1.0, 1.0, 0.5, 2.0), base);
    EXPECT_GE(composite_loss(1.0, 1.1, 1.0, 0.5, 2.0), base);
    EXPECT_GE(composite_loss(1.0, 1.0, 1.1, 0.5, 2.0), base);
}

TEST(CompositeLoss, RejectsBadWeights) {
    EXPECT_THROW(composite_loss(1, 1, 1, 1.5, 1.0), ContractError);
    EXPECT_THROW(composite_loss(1, 1, 1, 0.5, 0.0), ContractError);
}
