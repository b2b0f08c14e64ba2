#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "camtl/config.hpp"
#include "camtl/model.hpp"

namespace camtl {

// Linear warmup over the first warmup_fraction of steps, then linear decay
// to zero at the final step.
inline double scheduled_lr(const OptimizerConfig& o, std::size_t step, std::size_t total_steps) {
    const auto warm = static_cast<std::size_t>(std::llround(o.warmup_fraction * static_cast<double>(total_steps)));
    if (step < warm) return o.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
    if (!o.linear_decay || total_steps <= warm) return o.lr;
    return o.lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warm);
}

// Adam. Parameters without a gradient this step are skipped entirely, moments
// included, so untouched task embeddings and heads stay bitwise unchanged.
class Adam {
public:
    explicit Adam(OptimizerConfig config) : config_(config) {}

    void step(const std::vector<NamedParameter>& params, double lr) {
        for (const auto& p : params) {
            if (!p.trainable() || !p.tensor.has_grad()) continue;
            auto& s = state_[p.name];
            const auto g = p.tensor.grad();
            if (s.m.empty()) {
                s.m.assign(g.size(), 0.0);
                s.v.assign(g.size(), 0.0);
            }
            ++s.t;
            const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(s.t));
            const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(s.t));
            Tensor t = p.tensor;
            auto w = t.mutable_data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                s.m[i] = config_.beta1 * s.m[i] + (1.0 - config_.beta1) * g[i];
                s.v[i] = config_.beta2 * s.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
                w[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + config_.eps);
            }
        }
    }

private:
    struct Slot {
        std::vector<double> m, v;
        std::size_t t = 0;
    };
    OptimizerConfig config_;
    std::map<std::string, Slot> state_;
};

}  // namespace camtl
