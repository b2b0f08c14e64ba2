#pragma once

// Differentiable kernels. Matrices are row-major; "rows" of a tensor are its
// last-dimension slices. Broadcasting is explicit (broadcast_rows / _cols).

#include <cmath>
#include <numbers>

#include "camtl/tensor.hpp"

namespace camtl {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

inline void require_rank(const Tensor& a, std::size_t rank, const char* op) {
    if (a.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(a.shape()));
    }
}

// Leading dims collapse into rows; the last dim is the row width.
inline std::pair<std::size_t, std::size_t> as_rows(const Shape& shape) {
    if (shape.empty()) return {1, 1};
    const std::size_t width = shape.back();
    return {width == 0 ? 0 : shape_numel(shape) / width, width};
}

// C[m,n] (+)= A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            c[i * n + j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            double* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
        }
    }
}

template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
    return make_op(name, x.shape(), std::move(out), {x},
                   [deriv](const Node& self, std::span<const double> g, GradBuffers& gin) {
                       const auto& xin = self.parents[0]->data;
                       gin[0].resize(xin.size());
                       for (std::size_t i = 0; i < xin.size(); ++i) {
                           gin[0][i] = g[i] * deriv(xin[i], self.data[i]);
                       }
                   });
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    return detail::make_op(
        "matmul", {m, n}, std::move(out), {a, b},
        [m, k, n](const detail::Node& self, std::span<const double> g, detail::GradBuffers& gin) {
            const auto& ad = self.parents[0]->data;
            const auto& bd = self.parents[1]->data;
            if (detail::wants(self, 0)) {
                gin[0].assign(m * k, 0.0);
                detail::gemm_nt(g.data(), bd.data(), gin[0].data(), m, n, k);
            }
            if (detail::wants(self, 1)) {
                gin[1].assign(k * n, 0.0);
                detail::gemm_tn(ad.data(), g.data(), gin[1].data(), m, k, n);
            }
        });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank(a, 2, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(r * c);
    auto ad = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ad[i * c + j];
    return detail::make_op("transpose", {c, r}, std::move(out), {a},
                           [r, c](const detail::Node&, std::span<const double> g, detail::GradBuffers& gin) {
                               gin[0].resize(r * c);
                               for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < c; ++j) gin[0][i * c + j] = g[j * r + i];
                           });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return detail::make_op("reshape", std::move(shape), std::move(out), {a},
                           [](const detail::Node&, std::span<const double> g, detail::GradBuffers& gin) {
                               gin[0].assign(g.begin(), g.end());
                           });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
    return detail::make_op("add", a.shape(), std::move(out), {a, b},
                           [](const detail::Node& self, std::span<const double> g, detail::GradBuffers& gin) {
                               if (detail::wants(self, 0)) gin[0].assign(g.begin(), g.end());
                               if (detail::wants(self, 1)) gin[1].assign(g.begin(), g.end());
                           });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
    return detail::make_op("sub", a.shape(), std::move(out), {a, b},
                           [](const detail::Node& self, std::span<const double> g, detail::GradBuffers& gin) {
                               if (detail::wants(self, 0)) gin[0].assign(g.begin(), g.end());
                               if (detail::wants(self, 1)) {
                                   gin[1].resize(g.size());
                                   for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] = -g[i];
                               }
                           });
}

// Element-wise (Hadamard) product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    return detail::make_op("mul", a.shape(), std::move(out), {a, b},
                           [](const detail::Node& self, std::span<const double> g, detail::GradBuffers& gin) {
                               const auto& ad = self.parents[0]->data;
                               const auto& bd = self.parents[1]->data;
                               if (detail::wants(self, 0)) {
                                   gin[0].resize(g.size());
                                   for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] = g[i] * bd[i];
                               }
                               if (detail::wants(self, 1)) {
                                   gin[1].resize(g.size());
                                   for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] = g[i] * ad[i];
                               }
                           });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "div");
    std::vector<double> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] / bd[i];
    return detail::make_op("div", a.shape(), std::move(out), {a, b},
                           [](const detail::Node& self, std::span<const double> g, detail::GradBuffers& gin) {
                               const auto& bd = self.parents[1]->data;
                               if (detail::wants(self, 0)) {
                                   gin[0].resize(g.size());
                                   for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] = g[i] / bd[i];
                               }
                               if (detail::wants(self, 1)) {
                                   gin[1].resize(g.size());
                                   for (std::size_t i = 0; i < g.size(); ++i)
                                       gin[1][i] = -g[i] * self.data[i] / bd[i];
                               }
                           });
}

inline Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.numel());
    auto ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * factor;
    return detail::make_op("scale", a.shape(), std::move(out), {a},
                           [factor](const detail::Node&, std::span<const double> g, detail::GradBuffers& gin) {
                               gin[0].resize(g.size());
                               for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] = g[i] * factor;
                           });
}

inline Tensor add_scalar(const Tensor& a, double offset) {
    std::vector<double> out(a.numel());
    auto ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + offset;
    return detail::make_op("add_scalar", a.shape(), std::move(out), {a},
                           [](const detail::Node&, std::span<const double> g, detail::GradBuffers& gin) {
                               gin[0].assign(g.begin(), g.end());
                           });
}

// v[n] repeated as each of m rows -> [m, n].
inline Tensor broadcast_rows(const Tensor& v, std::size_t m) {
    detail::require_rank(v, 1, "broadcast_rows");
    const std::size_t n = v.dim(0);
    std::vector<double> out(m * n);
    auto vd = v.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(vd.begin(), vd.end(), out.begin() + i * n);
    return detail::make_op("broadcast_rows", {m, n}, std::move(out), {v},
                           [m, n](const detail::Node&, std::span<const double> g, detail::GradBuffers& gin) {
                               gin[0].assign(n, 0.0);
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) gin[0][j] += g[i * n + j];
                           });
}

// v[m] with v[i] filling row i -> [m, n].
inline Tensor broadcast_cols(const Tensor& v, std::size_t n) {
    detail::require_rank(v, 1, "broadcast_cols");
    const std::size_t m = v.dim(0);
    std::vector<double> out(m * n);
    auto vd = v.data();
    for (std::size_t i = 0; i < m; ++i) std::fill(out.begin() + i * n, out.begin() + (i + 1) * n, vd[i]);
    return detail::make_op("broadcast_cols", {m, n}, std::move(out), {v},
                           [m, n](const detail::Node&, std::span<const double> g, detail::GradBuffers& gin) {
                               gin[0].assign(m, 0.0);
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) gin[0][i] += g[i * n + j];
                           });
}

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    const std::size_t n = a.numel();
    return detail::make_op("sum", {}, {acc}, {a},
                           [n](const detail::Node&, std::span<const double> g, detail::GradBuffers& gin) {
                               gin[0].assign(n, g[0]);
                           });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor exp(const Tensor& x) {
    return detail::unary("exp", x, [](double v) { return std::exp(v); },
                         [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
    return detail::unary("log", x, [](double v) { return std::log(v); },
                         [](double v, double) { return 1.0 / v; });
}

inline Tensor sqrt(const Tensor& x) {
    return detail::unary("sqrt", x, [](double v) { return std::sqrt(v); },
                         [](double, double y) { return 0.5 / y; });
}

inline Tensor tanh(const Tensor& x) {
    return detail::unary("tanh", x, [](double v) { return std::tanh(v); },
                         [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary("sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                         [](double, double y) { return y * (1.0 - y); });
}

inline Tensor square(const Tensor& x) {
    return detail::unary("square", x, [](double v) { return v * v; },
                         [](double v, double) { return 2.0 * v; });
}

// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    return detail::unary(
        "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
        [inv_sqrt_2pi](double v, double) {
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
        });
}

inline Tensor softmax_lastdim(const Tensor& x) {
    auto [rows, width] = detail::as_rows(x.shape());
    if (width < 1) throw DimensionError("softmax_lastdim: empty last dimension");
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xd.data() + r * width;
        double* o = out.data() + r * width;
        const double mx = *std::max_element(in, in + width);
        double total = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
            o[j] = std::exp(in[j] - mx);
            total += o[j];
        }
        for (std::size_t j = 0; j < width; ++j) o[j] /= total;
    }
    return detail::make_op(
        "softmax", x.shape(), std::move(out), {x},
        [rows, width](const detail::Node& self, std::span<const double> g, detail::GradBuffers& gin) {
            gin[0].resize(rows * width);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = self.data.data() + r * width;
                const double* gr = g.data() + r * width;
                double dot = 0.0;
                for (std::size_t j = 0; j < width; ++j) dot += gr[j] * y[j];
                for (std::size_t j = 0; j < width; ++j) gin[0][r * width + j] = y[j] * (gr[j] - dot);
            }
        });
}

// Per-row mean and population variance (denominator d) over the last dim.
// Both outputs have the leading shape of the input.
inline std::pair<Tensor, Tensor> layer_stats(const Tensor& a) {
    if (a.rank() == 0) throw DimensionError("layer_stats: needs a feature dimension");
    auto [rows, d] = detail::as_rows(a.shape());
    if (d < 1) throw DimensionError("layer_stats: empty feature dimension");
    Shape lead(a.shape().begin(), a.shape().end() - 1);
    std::vector<double> mu(rows), var(rows);
    auto ad = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = ad.data() + r * d;
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += x[j];
        mu[r] = s / static_cast<double>(d);
        double q = 0.0;
        for (std::size_t j = 0; j < d; ++j) q += (x[j] - mu[r]) * (x[j] - mu[r]);
        var[r] = q / static_cast<double>(d);
    }
    Tensor mean_t = detail::make_op(
        "row_mean", lead, std::move(mu), {a},
        [rows, d](const detail::Node&, std::span<const double> g, detail::GradBuffers& gin) {
            gin[0].resize(rows * d);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < d; ++j) gin[0][r * d + j] = g[r] / static_cast<double>(d);
        });
    Tensor var_t = detail::make_op(
        "row_variance", lead, std::move(var), {a},
        [rows, d](const detail::Node& self, std::span<const double> g, detail::GradBuffers& gin) {
            const auto& x = self.parents[0]->data;
            gin[0].resize(rows * d);
            for (std::size_t r = 0; r < rows; ++r) {
                double s = 0.0;
                for (std::size_t j = 0; j < d; ++j) s += x[r * d + j];
                const double mu = s / static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j)
                    gin[0][r * d + j] = g[r] * 2.0 * (x[r * d + j] - mu) / static_cast<double>(d);
            }
        });
    return {mean_t, var_t};
}

// (a - mu) / sqrt(var + eps) per row of a 2-D tensor.
inline Tensor normalize_rows(const Tensor& a, double eps) {
    detail::require_rank(a, 2, "normalize_rows");
    const std::size_t n = a.dim(1);
    auto [mu, var] = layer_stats(a);
    Tensor centered = sub(a, broadcast_cols(mu, n));
    Tensor sigma = sqrt(add_scalar(var, eps));
    return div(centered, broadcast_cols(sigma, n));
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
    detail::require_rank(a, 2, "slice_cols");
    const std::size_t r = a.dim(0), c = a.dim(1);
    if (start + count > c) throw DimensionError("slice_cols: range exceeds " + shape_str(a.shape()));
    std::vector<double> out(r * count);
    auto ad = a.data();
    for (std::size_t i = 0; i < r; ++i)
        std::copy_n(ad.begin() + i * c + start, count, out.begin() + i * count);
    return detail::make_op(
        "slice_cols", {r, count}, std::move(out), {a},
        [r, c, start, count](const detail::Node&, std::span<const double> g, detail::GradBuffers& gin) {
            gin[0].assign(r * c, 0.0);
            for (std::size_t i = 0; i < r; ++i)
                std::copy_n(g.begin() + i * count, count, gin[0].begin() + i * c + start);
        });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t r = parts.front().dim(0);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_rank(p, 2, "concat_cols");
        if (p.dim(0) != r) throw DimensionError("concat_cols: row count mismatch");
        widths.push_back(p.dim(1));
        total += p.dim(1);
    }
    std::vector<double> out(r * total);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        auto pd = parts[k].data();
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(pd.begin() + i * widths[k], widths[k], out.begin() + i * total + offset);
        offset += widths[k];
    }
    return detail::make_op(
        "concat_cols", {r, total}, std::move(out), parts,
        [r, total, widths](const detail::Node& self, std::span<const double> g, detail::GradBuffers& gin) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < widths.size(); ++k) {
                if (detail::wants(self, k)) {
                    gin[k].resize(r * widths[k]);
                    for (std::size_t i = 0; i < r; ++i)
                        std::copy_n(g.begin() + i * total + off, widths[k], gin[k].begin() + i * widths[k]);
                }
                off += widths[k];
            }
        });
}

// Row i of a 2-D tensor as a vector.
inline Tensor select_row(const Tensor& a, std::size_t i) {
    detail::require_rank(a, 2, "select_row");
    const std::size_t r = a.dim(0), c = a.dim(1);
    if (i >= r) throw DimensionError("select_row: index out of range for " + shape_str(a.shape()));
    std::vector<double> out(a.data().begin() + i * c, a.data().begin() + (i + 1) * c);
    return detail::make_op("select_row", {c}, std::move(out), {a},
                           [r, c, i](const detail::Node&, std::span<const double> g, detail::GradBuffers& gin) {
                               gin[0].assign(r * c, 0.0);
                               std::copy(g.begin(), g.end(), gin[0].begin() + i * c);
                           });
}

// Rows of table picked by ids -> [ids.size(), width].
inline Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
    detail::require_rank(table, 2, "gather_rows");
    const std::size_t v = table.dim(0), c = table.dim(1);
    std::vector<std::size_t> idx;
    idx.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw DimensionError("gather_rows: id " + std::to_string(id) + " outside table of " +
                                 std::to_string(v) + " rows");
        }
        idx.push_back(static_cast<std::size_t>(id));
    }
    std::vector<double> out(idx.size() * c);
    auto td = table.data();
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(td.begin() + idx[i] * c, c, out.begin() + i * c);
    return detail::make_op("gather_rows", {idx.size(), c}, std::move(out), {table},
                           [v, c, idx](const detail::Node&, std::span<const double> g, detail::GradBuffers& gin) {
                               gin[0].assign(v * c, 0.0);
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                   for (std::size_t j = 0; j < c; ++j) gin[0][idx[i] * c + j] += g[i * c + j];
                           });
}

// Negative log-likelihood of one label under softmax(logits).
inline Tensor cross_entropy(const Tensor& logits, std::size_t label) {
    detail::require_rank(logits, 1, "cross_entropy");
    const std::size_t c = logits.dim(0);
    if (label >= c) throw DimensionError("cross_entropy: label outside class range");
    auto ld = logits.data();
    const double mx = *std::max_element(ld.begin(), ld.end());
    double total = 0.0;
    for (double v : ld) total += std::exp(v - mx);
    const double lse = mx + std::log(total);
    return detail::make_op("cross_entropy", {}, {lse - ld[label]}, {logits},
                           [c, label, lse](const detail::Node& self, std::span<const double> g,
                                           detail::GradBuffers& gin) {
                               const auto& x = self.parents[0]->data;
                               gin[0].resize(c);
                               for (std::size_t j = 0; j < c; ++j) {
                                   gin[0][j] = g[0] * (std::exp(x[j] - lse) - (j == label ? 1.0 : 0.0));
                               }
                           });
}

inline Tensor squared_error(const Tensor& prediction, double target) {
    if (prediction.numel() != 1) throw DimensionError("squared_error: prediction must be a single value");
    return square(add_scalar(reshape(prediction, {}), -target));
}

}  // namespace camtl
