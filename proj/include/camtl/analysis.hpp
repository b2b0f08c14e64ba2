#pragma once

// Diagnostics: covariance similarity between tasks' first-layer inputs,
// score dispersion across tasks and parameter accounting.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "camtl/dataset.hpp"
#include "camtl/model.hpp"

namespace camtl {

// Dense row-major matrix for the analysis routines.
struct Matrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> v;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), v(std::move(values)) {
        if (v.size() != r * c) throw DimensionError("Matrix: value count does not match shape");
    }
    static Matrix of(const Tensor& t) {
        if (t.rank() != 2) throw DimensionError("Matrix::of expects a rank-2 tensor");
        return {t.dim(0), t.dim(1), {t.data().begin(), t.data().end()}};
    }

    double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

inline Matrix gram(const Matrix& x) {
    Matrix c(x.cols, x.cols);
    for (std::size_t i = 0; i < x.cols; ++i)
        for (std::size_t j = i; j < x.cols; ++j) {
            double acc = 0.0;
            for (std::size_t r = 0; r < x.rows; ++r) acc += x(r, i) * x(r, j);
            c(i, j) = c(j, i) = acc;
        }
    return c;
}

struct EigenDecomposition {
    std::vector<double> values;  // descending
    Matrix vectors;              // columns, matching values
    std::size_t sweeps = 0;
};

// Cyclic Jacobi rotations until the off-diagonal mass is below tol relative to
// the Frobenius norm.
inline EigenDecomposition jacobi_eigen(Matrix a, double tol = 1e-10, std::size_t max_sweeps = 100) {
    if (a.rows != a.cols) throw DimensionError("jacobi_eigen: matrix must be square");
    const std::size_t n = a.rows;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < i; ++j) {
            if (std::abs(a(i, j) - a(j, i)) > 1e-9 * (std::abs(a(i, j)) + std::abs(a(j, i)) + 1.0)) {
                throw std::invalid_argument("jacobi_eigen: matrix is not symmetric");
            }
        }
    Matrix vecs(n, n);
    for (std::size_t i = 0; i < n; ++i) vecs(i, i) = 1.0;
    double norm = 0.0;
    for (double x : a.v) norm += x * x;
    norm = std::sqrt(norm);

    EigenDecomposition out;
    for (; out.sweeps < max_sweeps; ++out.sweeps) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += 2.0 * a(i, j) * a(i, j);
        if (std::sqrt(off) <= tol * norm) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                if (a(p, q) == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = vecs(k, p), vkq = vecs(k, q);
                    vecs(k, p) = c * vkp - s * vkq;
                    vecs(k, q) = s * vkp + c * vkq;
                }
            }
    }
    if (out.sweeps == max_sweeps) throw NumericError("jacobi_eigen: no convergence");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
    out.vectors = Matrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        out.values.push_back(a(order[k], order[k]));
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = vecs(i, order[k]);
    }
    return out;
}

enum class RankRule {
    mass,   // smallest r whose leading eigenvalues hold the fraction of the total
    count,  // ceil(fraction * d)
};

struct RankTruncation {
    Matrix u;                    // d x r
    std::vector<double> values;  // r leading eigenvalues of X^T X
    std::size_t rank = 0;
    std::vector<double> spectrum;  // all eigenvalues, descending
};

inline RankTruncation rank_truncation(const Matrix& x, RankRule rule = RankRule::mass, double fraction = 0.99) {
    for (double v : x.v) {
        if (!std::isfinite(v)) throw NumericError("rank_truncation: non-finite activation");
    }
    auto eig = jacobi_eigen(gram(x));
    for (auto& v : eig.values) v = std::max(v, 0.0);  // PSD, clip rounding
    const double total = std::accumulate(eig.values.begin(), eig.values.end(), 0.0);
    if (!(total > 0.0)) throw NumericError("rank_truncation: zero matrix has no spectrum");
    const std::size_t d = eig.values.size();

    std::size_t r = 0;
    if (rule == RankRule::count) {
        r = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(d) - 1e-9));
    } else {
        double cum = 0.0;
        while (r < d) {
            cum += eig.values[r++];
            if (cum >= fraction * total * (1.0 - 1e-12)) break;
        }
    }
    r = std::clamp<std::size_t>(r, 1, d);

    RankTruncation out;
    out.rank = r;
    out.spectrum = eig.values;
    out.values.assign(eig.values.begin(), eig.values.begin() + static_cast<std::ptrdiff_t>(r));
    out.u = Matrix(d, r);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t k = 0; k < r; ++k) out.u(i, k) = eig.vectors(i, k);
    return out;
}

// U D^{1/2}, d x r.
inline Matrix scaled_basis(const RankTruncation& t) {
    Matrix a = t.u;
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t k = 0; k < a.cols; ++k) a(i, k) *= std::sqrt(t.values[k]);
    return a;
}

inline double frobenius_cross(const Matrix& a, const Matrix& b) {
    // ||a^T b||_F
    double acc = 0.0;
    for (std::size_t i = 0; i < a.cols; ++i)
        for (std::size_t j = 0; j < b.cols; ++j) {
            double dot = 0.0;
            for (std::size_t r = 0; r < a.rows; ++r) dot += a(r, i) * b(r, j);
            acc += dot * dot;
        }
    return std::sqrt(acc);
}

inline double frobenius(const Matrix& a) {
    double acc = 0.0;
    for (double x : a.v) acc += x * x;
    return std::sqrt(acc);
}

enum class CovSimNorm {
    // ||A_i^T A_j|| / sqrt(||A_i^T A_i|| ||A_j^T A_j||), A = U D^{1/2}; equals 1 on itself
    self_normalized,
    // ||A_i^T A_j|| / (||A_i|| ||A_j||) as printed; below 1 on itself when r > 1
    literal,
};

inline double covsim(const RankTruncation& ti, const RankTruncation& tj, CovSimNorm norm = CovSimNorm::self_normalized) {
    if (ti.u.rows != tj.u.rows) throw DimensionError("covsim: activation widths differ");
    const Matrix ai = scaled_basis(ti), aj = scaled_basis(tj);
    const double num = frobenius_cross(ai, aj);
    if (norm == CovSimNorm::literal) return num / (frobenius(ai) * frobenius(aj));
    return num / std::sqrt(frobenius_cross(ai, ai) * frobenius_cross(aj, aj));
}

inline double covsim(const Matrix& xi, const Matrix& xj, RankRule rule = RankRule::mass,
                     CovSimNorm norm = CovSimNorm::self_normalized) {
    return covsim(rank_truncation(xi, rule), rank_truncation(xj, rule), norm);
}

struct CovSimReport {
    std::vector<std::string> tasks;
    Matrix pairwise;
    std::vector<double> averaged;
    std::vector<std::size_t> ranks;
};

inline std::vector<double> avg_covsim(const Matrix& pairwise) {
    const std::size_t T = pairwise.rows;
    if (pairwise.cols != T) throw DimensionError("avg_covsim: pairwise matrix must be square");
    if (T < 2) throw std::invalid_argument("avg_covsim: need at least 2 tasks");
    std::vector<double> out(T, 0.0);
    for (std::size_t i = 0; i < T; ++i) {
        for (std::size_t j = 0; j < T; ++j) {
            if (j != i) out[i] += pairwise(i, j);
        }
        out[i] /= static_cast<double>(T - 1);
    }
    return out;
}

inline CovSimReport covsim_report(const std::vector<std::string>& tasks, const std::vector<Matrix>& samples,
                                  RankRule rule = RankRule::mass, CovSimNorm norm = CovSimNorm::self_normalized) {
    if (tasks.size() != samples.size()) throw std::invalid_argument("covsim_report: one sample per task");
    std::vector<RankTruncation> truncs;
    for (const auto& x : samples) truncs.push_back(rank_truncation(x, rule));
    CovSimReport rep;
    rep.tasks = tasks;
    const std::size_t T = tasks.size();
    rep.pairwise = Matrix(T, T);
    for (std::size_t i = 0; i < T; ++i) {
        rep.ranks.push_back(truncs[i].rank);
        for (std::size_t j = i; j < T; ++j) rep.pairwise(i, j) = rep.pairwise(j, i) = covsim(truncs[i], truncs[j], norm);
    }
    if (T >= 2) rep.averaged = avg_covsim(rep.pairwise);
    return rep;
}

// Population standard deviation of per-task scores, two passes.
inline double task_sigma(const std::vector<double>& scores) {
    if (scores.size() < 2) throw std::invalid_argument("task_sigma: need at least 2 scores");
    double mean = 0.0;
    for (double s : scores) mean += s;
    mean /= static_cast<double>(scores.size());
    double var = 0.0;
    for (double s : scores) var += (s - mean) * (s - mean);
    return std::sqrt(var / static_cast<double>(scores.size()));
}

// Inputs to the first transformer layer for each example, one row each:
// the mean over non-pad positions.
inline Matrix first_layer_inputs(const CamtlModel& model, const std::string& task, const Dataset& data,
                                 std::size_t limit = 0) {
    NoGradGuard guard;
    const std::size_t m = limit == 0 ? data.size() : std::min(limit, data.size());
    const std::size_t d = model.config().d_model;
    Matrix x(m, d);
    for (std::size_t i = 0; i < m; ++i) {
        const auto& tokens = data[i].tokens;
        Tensor e = model.embed(tokens, task);
        std::size_t used = 0;
        for (std::size_t p = 0; p < tokens.size(); ++p) {
            if (tokens[p] == kPadToken) continue;
            ++used;
            for (std::size_t c = 0; c < d; ++c) x(i, c) += e.at(p, c);
        }
        for (std::size_t c = 0; c < d; ++c) x(i, c) /= static_cast<double>(std::max<std::size_t>(used, 1));
    }
    return x;
}

struct ParameterReport {
    std::size_t total = 0;
    std::size_t trainable = 0;
    std::size_t frozen = 0;
    std::map<std::string, std::size_t> by_group;
    std::map<std::string, std::size_t> trainable_by_group;
    // Per-layer attention generator output width: full block versus block diagonal.
    std::size_t full_generator_dim = 0;
    std::size_t block_generator_dim = 0;
    double generator_ratio = 0.0;  // N^2
    // Raw bias entries: one L x L block versus N blocks of (L/N)^2.
    std::size_t full_block_entries = 0;
    std::size_t block_entries = 0;
    double block_entry_ratio = 0.0;  // N
};

inline ParameterReport parameter_report(const CamtlModel& model) {
    ParameterReport rep;
    for (const auto& p : model.parameters()) {
        const std::size_t n = p.tensor.numel();
        rep.total += n;
        rep.by_group[p.group] += n;
        if (p.trainable()) {
            rep.trainable += n;
            rep.trainable_by_group[p.group] += n;
        } else {
            rep.frozen += n;
        }
    }
    const auto& cfg = model.config();
    const std::size_t L = cfg.seq_len;
    const std::size_t N = cfg.attention == AttentionVariant::full_block ? 1 : cfg.blocks();
    std::mt19937_64 scratch(0);
    auto full = ConditionalAttentionSite::make(L, 1, cfg.d_model, scratch);
    auto block = ConditionalAttentionSite::make(L, N, cfg.d_model, scratch);
    rep.full_generator_dim = full.generator.gamma_bias.numel();
    rep.block_generator_dim = block.generator.gamma_bias.numel();
    rep.generator_ratio = static_cast<double>(rep.full_generator_dim) / static_cast<double>(rep.block_generator_dim);
    for (const auto& a : full.blocks) rep.full_block_entries += a.numel();
    for (const auto& a : block.blocks) rep.block_entries += a.numel();
    rep.block_entry_ratio = static_cast<double>(rep.full_block_entries) / static_cast<double>(rep.block_entries);
    return rep;
}

}  // namespace camtl
