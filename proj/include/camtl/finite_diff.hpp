#pragma once

#include <functional>

#include "camtl/tensor.hpp"

namespace camtl {

class OracleError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Compares the tape gradient of f at x with central differences.
//
// x must be a leaf; it is perturbed in place and restored. f may close over
// other tensors, so the same routine checks any parameter group of a larger
// model. Returns max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8).
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                 double step = 1e-5) {
    if (!(step > 0.0)) throw UsageError("finite_diff_check: step must be positive");
    if (!x.is_leaf()) throw UsageError("finite_diff_check: x must be a leaf tensor");

    const bool had_requires_grad = x.requires_grad();
    x.set_requires_grad(true);
    x.zero_grad();

    const double first = f(x).item();
    const double second = f(x).item();
    if (first != second) {
        throw OracleError("finite_diff_check: f is not deterministic (" + std::to_string(first) +
                          " vs " + std::to_string(second) + ")");
    }

    Tensor out = f(x);
    backward(out);
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    x.zero_grad();

    double worst = 0.0;
    auto values = x.mutable_data();
    {
        NoGradGuard no_grad;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + step;
            const double plus = f(x).item();
            values[i] = saved - step;
            const double minus = f(x).item();
            values[i] = saved;
            const double numeric = (plus - minus) / (2.0 * step);
            const double rel = std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-8);
            worst = std::max(worst, rel);
        }
    }
    x.set_requires_grad(had_requires_grad);
    return worst;
}

}  // namespace camtl
