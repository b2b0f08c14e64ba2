#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "camtl/analysis.hpp"

using namespace camtl;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
    Matrix m(r, c);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : m.v) v = dist(rng);
    return m;
}

Eigen::MatrixXd to_eigen(const Matrix& m) {
    Eigen::MatrixXd e(m.rows, m.cols);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) e(i, j) = m(i, j);
    return e;
}

// Truncated covariance by Eigen, 99% of eigenvalue mass.
struct EigenTruncation {
    Eigen::MatrixXd u;
    Eigen::VectorXd values;
};

EigenTruncation eigen_truncate(const Matrix& x) {
    Eigen::MatrixXd X = to_eigen(x);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(X.transpose() * X);
    Eigen::VectorXd vals = solver.eigenvalues().reverse();
    Eigen::MatrixXd vecs = solver.eigenvectors().rowwise().reverse();
    const double total = vals.sum();
    double cum = 0;
    int r = 0;
    while (r < vals.size()) {
        cum += vals(r++);
        if (cum >= 0.99 * total * (1 - 1e-12)) break;
    }
    return {vecs.leftCols(r), vals.head(r)};
}

double loops_covsim(const EigenTruncation& a, const EigenTruncation& b, bool literal) {
    // A = U D^{1/2}; every product by explicit loops.
    auto scaled = [](const EigenTruncation& t) {
        Eigen::MatrixXd m = t.u;
        for (int k = 0; k < m.cols(); ++k) m.col(k) *= std::sqrt(t.values(k));
        return m;
    };
    Eigen::MatrixXd ai = scaled(a), aj = scaled(b);
    auto cross = [](const Eigen::MatrixXd& p, const Eigen::MatrixXd& q) {
        double acc = 0;
        for (int i = 0; i < p.cols(); ++i)
            for (int j = 0; j < q.cols(); ++j) {
                double dot = 0;
                for (int r = 0; r < p.rows(); ++r) dot += p(r, i) * q(r, j);
                acc += dot * dot;
            }
        return std::sqrt(acc);
    };
    auto fro = [](const Eigen::MatrixXd& p) {
        double acc = 0;
        for (int i = 0; i < p.size(); ++i) acc += p.data()[i] * p.data()[i];
        return std::sqrt(acc);
    };
    if (literal) return cross(ai, aj) / (fro(ai) * fro(aj));
    return cross(ai, aj) / std::sqrt(cross(ai, ai) * cross(aj, aj));
}

// ||C - P C P||_F for the projector onto the columns of q (orthonormal).
double projector_error(const Eigen::MatrixXd& c, const Eigen::MatrixXd& q) {
    Eigen::MatrixXd p = q * q.transpose();
    return (c - p * c * p).norm();
}

double truncation_error(const Eigen::MatrixXd& c, const RankTruncation& t) {
    Eigen::MatrixXd approx = Eigen::MatrixXd::Zero(c.rows(), c.cols());
    for (std::size_t k = 0; k < t.rank; ++k) {
        Eigen::VectorXd u(c.rows());
        for (int i = 0; i < c.rows(); ++i) u(i) = t.u(i, k);
        approx += t.values[k] * u * u.transpose();
    }
    return (c - approx).norm();
}

ModelConfig small_config() {
    ModelConfig c;
    c.seq_len = 8;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.vocab_size = 20;
    return c;
}

}  // namespace

TEST(Jacobi, MatchesEigenSolver) {
    std::mt19937_64 rng(1);
    for (std::size_t n : {2u, 5u, 8u, 16u}) {
        Matrix c = gram(random_matrix(3 * n, n, rng));
        auto ours = jacobi_eigen(c);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(to_eigen(c));
        Eigen::VectorXd ref = solver.eigenvalues().reverse();
        for (std::size_t k = 0; k < n; ++k) EXPECT_NEAR(ours.values[k], ref(k), 1e-9 * ref(0));
        // C v = lambda v
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t i = 0; i < n; ++i) {
                double cv = 0;
                for (std::size_t j = 0; j < n; ++j) cv += c(i, j) * ours.vectors(j, k);
                EXPECT_NEAR(cv, ours.values[k] * ours.vectors(i, k), 1e-8 * ref(0));
            }
    }
}

TEST(Jacobi, RejectsNonSymmetric) {
    EXPECT_THROW(jacobi_eigen(Matrix(2, 2, {1, 2, 3, 4})), std::invalid_argument);
    EXPECT_THROW(jacobi_eigen(Matrix(2, 3)), DimensionError);
}

TEST(RankTruncation, SingleColumnIsRankOne) {
    Matrix x(10, 4);
    for (std::size_t r = 0; r < 10; ++r) x(r, 2) = static_cast<double>(r) + 1.0;
    EXPECT_EQ(rank_truncation(x).rank, 1u);
}

TEST(RankTruncation, FlatSpectrum) {
    for (std::size_t d : {8u, 50u, 100u}) {
        Matrix x(d, d);
        for (std::size_t i = 0; i < d; ++i) x(i, i) = 1.0;
        const auto expected = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(d) - 1e-9));
        EXPECT_EQ(rank_truncation(x, RankRule::mass).rank, expected);
        EXPECT_EQ(rank_truncation(x, RankRule::count).rank, expected);
    }
}

TEST(RankTruncation, CountRuleKeepsNearlyEverything) {
    std::mt19937_64 rng(2);
    Matrix x = random_matrix(50, 8, rng);
    for (std::size_t c = 0; c < 8; ++c)
        for (std::size_t r = 0; r < 50; ++r) x(r, c) *= std::pow(0.1, static_cast<double>(c));
    EXPECT_EQ(rank_truncation(x, RankRule::count).rank, 8u);
    EXPECT_LT(rank_truncation(x, RankRule::mass).rank, 8u);
}

TEST(RankTruncation, ZeroMatrixIsAnError) { EXPECT_THROW(rank_truncation(Matrix(5, 3)), NumericError); }

TEST(RankTruncation, MatchesEckartYoungOracle) {
    std::mt19937_64 rng(3);
    Matrix x = random_matrix(50, 8, rng);
    auto t = rank_truncation(x);
    Eigen::MatrixXd c = to_eigen(gram(x));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(c);
    Eigen::VectorXd vals = solver.eigenvalues().reverse();
    double tail = 0;
    for (int k = static_cast<int>(t.rank); k < vals.size(); ++k) tail += vals(k) * vals(k);
    EXPECT_NEAR(truncation_error(c, t), std::sqrt(tail), 1e-8 * vals(0));
    auto ref = eigen_truncate(x);
    EXPECT_EQ(static_cast<int>(t.rank), ref.u.cols());
}

// Every rank r on 6x6 covariances: the truncation is no worse than any
// projector onto a subset of eigenvectors or coordinate axes, or a random
// r-dimensional subspace.
TEST(RankTruncation, OptimalAgainstExhaustiveProjectorSearch) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 5; ++trial) {
        Matrix x = random_matrix(12, 6, rng);
        Eigen::MatrixXd c = to_eigen(gram(x));
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(c);
        for (std::size_t r = 1; r <= 6; ++r) {
            auto t = rank_truncation(x, RankRule::count, static_cast<double>(r) / 6.0);
            ASSERT_EQ(t.rank, r);
            const double ours = truncation_error(c, t);
            const double tol = 1e-9 * c.norm();
            for (unsigned mask = 1; mask < 64; ++mask) {
                if (static_cast<std::size_t>(__builtin_popcount(mask)) != r) continue;
                Eigen::MatrixXd eig_cols(6, r), axis_cols = Eigen::MatrixXd::Zero(6, r);
                int k = 0;
                for (int i = 0; i < 6; ++i) {
                    if (!(mask & (1u << i))) continue;
                    eig_cols.col(k) = solver.eigenvectors().col(i);
                    axis_cols(i, k) = 1.0;
                    ++k;
                }
                EXPECT_LE(ours, projector_error(c, eig_cols) + tol);
                EXPECT_LE(ours, projector_error(c, axis_cols) + tol);
            }
            for (int s = 0; s < 50; ++s) {
                Eigen::MatrixXd g = to_eigen(random_matrix(6, r, rng));
                Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
                Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(6, r);
                EXPECT_LE(ours, projector_error(c, q) + tol);
            }
        }
    }
}

TEST(CovSim, SelfSimilarityIsOne) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        Matrix x = random_matrix(40, 6, rng);
        EXPECT_NEAR(covsim(x, x), 1.0, 1e-6);
        EXPECT_GT(rank_truncation(x).rank, 1u);
    }
}

TEST(CovSim, LiteralNormalisationFallsShortOfOneOnItself) {
    std::mt19937_64 rng(6);
    Matrix x = random_matrix(40, 6, rng);
    const double lit = covsim(x, x, RankRule::mass, CovSimNorm::literal);
    EXPECT_LT(lit, 1.0 - 1e-3);
    // Rank one is the only case where the two agree on itself.
    Matrix y(10, 3);
    for (std::size_t r = 0; r < 10; ++r) y(r, 0) = 1.0 + static_cast<double>(r);
    EXPECT_NEAR(covsim(y, y, RankRule::mass, CovSimNorm::literal), 1.0, 1e-12);
}

TEST(CovSim, OrthogonalSubspacesGiveZero) {
    Matrix xi(10, 4), xj(10, 4);
    for (std::size_t r = 0; r < 10; ++r) {
        xi(r, 0) = 1.0 + static_cast<double>(r);
        xj(r, 1) = 2.0 - static_cast<double>(r);
    }
    EXPECT_NEAR(covsim(xi, xj), 0.0, 1e-9);
    EXPECT_NEAR(covsim(xi, xj, RankRule::mass, CovSimNorm::literal), 0.0, 1e-9);
}

TEST(CovSim, SymmetricAndBounded) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        Matrix xi = random_matrix(30, 5, rng), xj = random_matrix(20, 5, rng);
        for (std::size_t r = 0; r < xj.rows; ++r) xj(r, 0) *= 5.0;
        const double a = covsim(xi, xj), b = covsim(xj, xi);
        EXPECT_NEAR(a, b, 1e-10);
        EXPECT_GE(a, 0.0);
        EXPECT_LE(a, 1.0 + 1e-9);
    }
}

TEST(CovSim, MatchesDirectOracle) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 5; ++trial) {
        Matrix xi = random_matrix(40, 6, rng), xj = random_matrix(40, 6, rng);
        for (std::size_t r = 0; r < 40; ++r) xi(r, 3) *= 4.0;
        auto ti = eigen_truncate(xi), tj = eigen_truncate(xj);
        EXPECT_NEAR(covsim(xi, xj), loops_covsim(ti, tj, false), 1e-8);
        EXPECT_NEAR(covsim(xi, xj, RankRule::mass, CovSimNorm::literal), loops_covsim(ti, tj, true), 1e-8);
    }
}

TEST(CovSim, ReportAveragesOffDiagonal) {
    std::mt19937_64 rng(9);
    std::vector<Matrix> samples;
    for (int t = 0; t < 4; ++t) samples.push_back(random_matrix(30, 5, rng));
    auto rep = covsim_report({"a", "b", "c", "d"}, samples);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_NEAR(rep.pairwise(i, i), 1.0, 1e-6);
        double acc = 0;
        for (std::size_t j = 0; j < 4; ++j) acc += j == i ? 0.0 : rep.pairwise(i, j);
        EXPECT_NEAR(rep.averaged[i], acc / 3.0, 1e-15);
    }
}

TEST(AvgCovSim, Examples) {
    EXPECT_EQ(avg_covsim(Matrix(2, 2, {1, 0.3, 0.3, 1})), (std::vector<double>{0.3, 0.3}));
    Matrix eq(3, 3, {1, 0.6, 0.6, 0.6, 1, 0.6, 0.6, 0.6, 1});
    for (double v : avg_covsim(eq)) EXPECT_NEAR(v, 0.6, 1e-15);
    EXPECT_THROW(avg_covsim(Matrix(1, 1, {1})), std::invalid_argument);
}

TEST(TaskSigma, Examples) {
    EXPECT_EQ(task_sigma({70, 70, 70}), 0.0);
    EXPECT_EQ(task_sigma({80, 90}), 5.0);
    std::vector<double> scores{58.8, 93.7, 90.4, 91.9, 88.9, 86.7, 92.1, 74.6, 89.8};
    long double mean = 0;
    for (double s : scores) mean += s;
    mean /= scores.size();
    long double var = 0;
    for (double s : scores) var += (s - mean) * (s - mean);
    EXPECT_NEAR(task_sigma(scores), static_cast<double>(std::sqrt(var / scores.size())), 1e-12);
    EXPECT_THROW(task_sigma({1.0}), std::invalid_argument);
}

TEST(TaskSigma, TranslationInvariantAndScaleLinear) {
    std::vector<double> s{1.5, 7.0, 3.25, 9.0};
    std::vector<double> shifted, scaled;
    for (double v : s) {
        shifted.push_back(v + 40.0);
        scaled.push_back(v * 3.0);
    }
    EXPECT_NEAR(task_sigma(shifted), task_sigma(s), 1e-12);
    EXPECT_NEAR(task_sigma(scaled), 3.0 * task_sigma(s), 1e-12);
}

TEST(ParameterReport, BlockRatios) {
    ModelConfig cfg = small_config();
    ASSERT_EQ(cfg.blocks(), 2u);
    CamtlModel model(cfg, {{"a", HeadKind::classification, 2}});
    auto rep = parameter_report(model);
    EXPECT_EQ(rep.full_generator_dim, 64u);
    EXPECT_EQ(rep.block_generator_dim, 16u);
    EXPECT_EQ(rep.generator_ratio, 4.0);
    EXPECT_EQ(rep.full_block_entries, 64u);
    EXPECT_EQ(rep.block_entries, 32u);
    EXPECT_EQ(rep.block_entry_ratio, 2.0);
    EXPECT_EQ(rep.total, rep.trainable + rep.frozen);
}

TEST(ParameterReport, EverythingFrozen) {
    CamtlModel model(small_config(), {{"a", HeadKind::classification, 2}});
    for (auto& p : model.parameters()) p.tensor.set_requires_grad(false);
    auto rep = parameter_report(model);
    EXPECT_EQ(rep.trainable, 0u);
    EXPECT_EQ(rep.frozen, rep.total);
}

TEST(ParameterReport, AddingATaskAddsEmbeddingAndHead) {
    CamtlModel model(small_config(), {{"a", HeadKind::classification, 2}});
    auto before = parameter_report(model);
    model.add_task({"b", HeadKind::classification, 3});
    auto after = parameter_report(model);
    EXPECT_EQ(after.total - before.total, 16u + 16u * 3u + 3u);
    EXPECT_EQ(after.trainable - before.trainable, 16u + 16u * 3u + 3u);
    for (const auto& [group, n] : before.by_group) {
        if (group != "task_embedding" && group != "head") EXPECT_EQ(after.by_group.at(group), n) << group;
    }
}

TEST(FirstLayerInputs, PoolsNonPadPositions) {
    CamtlModel model(small_config(), {{"a", HeadKind::classification, 2}});
    Dataset data;
    data.examples.push_back({{1, 4, 5, 0, 0, 0, 0, 0}, 0});
    Matrix x = first_layer_inputs(model, "a", data);
    Tensor e = model.embed(data[0].tokens, "a");
    ASSERT_EQ(x.rows, 1u);
    for (std::size_t c = 0; c < 16; ++c) {
        EXPECT_NEAR(x(0, c), (e.at(0, c) + e.at(1, c) + e.at(2, c)) / 3.0, 1e-15);
    }
}
