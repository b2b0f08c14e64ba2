#pragma once

// Multi-task batch construction: the uncertainty-driven policy plus the
// uniform and size-proportional baselines.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "camtl/dataset.hpp"

namespace camtl {

enum class SamplerPolicy { mt_uncertainty, random, task_size };

inline std::string to_string(SamplerPolicy p) {
    switch (p) {
        case SamplerPolicy::mt_uncertainty: return "mt_uncertainty";
        case SamplerPolicy::random: return "random";
        case SamplerPolicy::task_size: return "task_size";
    }
    return "?";
}

inline SamplerPolicy parse_policy(const std::string& s) {
    if (s == "mt_uncertainty") return SamplerPolicy::mt_uncertainty;
    if (s == "random") return SamplerPolicy::random;
    if (s == "task_size") return SamplerPolicy::task_size;
    throw std::invalid_argument("unknown sampler policy '" + s + "' (expected mt_uncertainty, random or task_size)");
}

// Walks a shuffled permutation of one task's training set. Running off the
// end reshuffles and starts over.
class TaskCursor {
public:
    TaskCursor(std::string task, std::shared_ptr<const Dataset> data, std::size_t classes, bool regression,
               std::uint64_t seed)
        : task_(std::move(task)), data_(std::move(data)), classes_(classes), regression_(regression), rng_(seed) {
        if (!data_ || data_->empty()) throw std::invalid_argument("task '" + task_ + "' has no training data");
        if (classes_ < 2) throw std::invalid_argument("task '" + task_ + "' needs at least 2 classes or bins");
        order_.resize(data_->size());
        shuffle();
    }

    const std::string& task() const { return task_; }
    const Dataset& data() const { return *data_; }
    std::size_t size() const { return data_->size(); }
    std::size_t classes() const { return classes_; }
    bool regression() const { return regression_; }
    std::size_t position() const { return position_; }
    std::size_t reload_count() const { return reloads_; }
    std::size_t drawn() const { return drawn_; }

    // Index of the next example; consumes it.
    std::size_t next() {
        if (position_ == order_.size()) {
            shuffle();
            ++reloads_;
        }
        ++drawn_;
        return order_[position_++];
    }

private:
    void shuffle() {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::shuffle(order_.begin(), order_.end(), rng_);
        position_ = 0;
    }

    std::string task_;
    std::shared_ptr<const Dataset> data_;
    std::size_t classes_;
    bool regression_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> order_;
    std::size_t position_ = 0;
    std::size_t reloads_ = 0;
    std::size_t drawn_ = 0;
};

// Entropy in nats. 0 log 0 is taken as 0.
inline double shannon_entropy(std::span<const double> probs) {
    if (probs.empty()) throw std::invalid_argument("shannon_entropy: empty distribution");
    double total = 0.0;
    for (double p : probs) {
        if (!std::isfinite(p) || p < 0.0) throw std::invalid_argument("shannon_entropy: negative or non-finite entry");
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-6) {
        throw std::invalid_argument("shannon_entropy: probabilities sum to " + std::to_string(total));
    }
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) h -= p * std::log(p);
    }
    return std::max(h, 0.0);
}

inline double max_entropy_uniform(std::size_t classes) {
    if (classes < 2) throw std::invalid_argument("max_entropy_uniform: need at least 2 classes");
    return std::log(static_cast<double>(classes));
}

// Two-bin soft histogram for a bounded regression output, centred on the
// middle of [lo, hi].
inline std::vector<double> regression_pseudo_distribution(double y, double lo, double hi) {
    if (!(hi > lo)) throw std::invalid_argument("regression range must satisfy lo < hi");
    const double mid = 0.5 * (lo + hi);
    const double p = 1.0 / (1.0 + std::exp(-4.0 * (y - mid) / (hi - lo)));
    return {1.0 - p, p};
}

struct Candidate {
    std::size_t task = 0;
    std::size_t draw = 0;     // order within the task's draws for this pool
    std::size_t example = 0;  // index into the task's dataset
    double entropy = 0.0;
    double uncertainty = 0.0;
};

struct CandidatePool {
    std::size_t b = 0;
    std::vector<Candidate> candidates;
    std::vector<double> mean_entropy;  // per task, NaN for tasks left out of scoring
    std::vector<bool> scored;
    double max_mean_entropy = 0.0;
    bool degenerate = false;  // every prediction certain, caller falls back to random
};

struct BatchItem {
    std::size_t task = 0;
    std::size_t example = 0;
    bool operator==(const BatchItem&) const = default;
};

// predict(task, examples) returns one probability vector per example.
// Regression tasks must already be mapped to their two-bin distribution.
using ScoreFn = std::function<std::vector<std::vector<double>>(std::size_t task, std::span<const std::size_t> examples)>;

// Draws b candidates from every scored task, runs the read-only predictor and
// normalises entropies. Draws are consumed whether or not they are selected
// later. Tasks with exclude[t] set are neither drawn nor scored.
inline CandidatePool score_pool(std::vector<TaskCursor>& cursors, std::size_t b, const ScoreFn& predict,
                                std::size_t threads = 1, const std::vector<bool>& exclude = {}) {
    if (cursors.empty()) throw std::invalid_argument("score_pool: no tasks");
    if (b == 0) throw std::invalid_argument("score_pool: batch size must be positive");
    const std::size_t T = cursors.size();
    CandidatePool pool;
    pool.b = b;
    pool.scored.assign(T, true);
    for (std::size_t t = 0; t < T && t < exclude.size(); ++t) pool.scored[t] = !exclude[t];

    std::vector<std::vector<std::size_t>> drawn(T);
    for (std::size_t t = 0; t < T; ++t) {
        if (!pool.scored[t]) continue;
        for (std::size_t i = 0; i < b; ++i) drawn[t].push_back(cursors[t].next());
    }

    std::vector<std::vector<std::vector<double>>> probs(T);
    auto run = [&](std::size_t t) {
        if (pool.scored[t]) probs[t] = predict(t, drawn[t]);
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, T));
    if (workers == 1) {
        for (std::size_t t = 0; t < T; ++t) run(t);
    } else {
        std::vector<std::thread> pool_threads;
        std::vector<std::exception_ptr> errors(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool_threads.emplace_back([&, w] {
                try {
                    for (std::size_t t = w; t < T; t += workers) run(t);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& th : pool_threads) th.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }

    pool.mean_entropy.assign(T, std::nan(""));
    bool any_scored = false;
    for (std::size_t t = 0; t < T; ++t) {
        if (!pool.scored[t]) continue;
        if (probs[t].size() != b) throw std::logic_error("score_pool: predictor returned wrong number of rows");
        any_scored = true;
        double total = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            if (probs[t][i].size() != cursors[t].classes()) {
                throw std::invalid_argument("score_pool: task '" + cursors[t].task() + "' expects " +
                                            std::to_string(cursors[t].classes()) + " probabilities");
            }
            const double h = shannon_entropy(probs[t][i]);
            pool.candidates.push_back({t, i, drawn[t][i], h, 0.0});
            total += h;
        }
        pool.mean_entropy[t] = total / static_cast<double>(b);
        pool.max_mean_entropy = std::max(pool.max_mean_entropy, pool.mean_entropy[t]);
    }
    if (!any_scored || pool.max_mean_entropy <= 0.0) {
        pool.degenerate = true;
        return pool;
    }
    for (auto& c : pool.candidates) {
        c.uncertainty = c.entropy / (pool.max_mean_entropy * max_entropy_uniform(cursors[c.task].classes()));
    }
    return pool;
}

// Highest uncertainty first; ties go to the earlier task, then the earlier draw.
inline bool candidate_before(const Candidate& a, const Candidate& b) {
    if (a.uncertainty != b.uncertainty) return a.uncertainty > b.uncertainty;
    if (a.task != b.task) return a.task < b.task;
    return a.draw < b.draw;
}

inline std::vector<Candidate> select_top(const CandidatePool& pool, std::size_t count) {
    std::vector<Candidate> sorted = pool.candidates;
    count = std::min(count, sorted.size());
    std::partial_sort(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(count), sorted.end(),
                      candidate_before);
    sorted.resize(count);
    return sorted;
}

inline std::vector<Candidate> select_top_b(const CandidatePool& pool) { return select_top(pool, pool.b); }

inline std::vector<BatchItem> sample_random(std::vector<TaskCursor>& cursors, std::size_t b, std::mt19937_64& rng) {
    if (cursors.empty()) throw std::invalid_argument("sample_random: no tasks");
    std::uniform_int_distribution<std::size_t> pick(0, cursors.size() - 1);
    std::vector<BatchItem> batch;
    batch.reserve(b);
    for (std::size_t i = 0; i < b; ++i) {
        const std::size_t t = pick(rng);
        batch.push_back({t, cursors[t].next()});
    }
    return batch;
}

inline std::vector<double> task_size_probabilities(const std::vector<TaskCursor>& cursors) {
    double total = 0.0;
    for (const auto& c : cursors) total += static_cast<double>(c.size());
    std::vector<double> p;
    for (const auto& c : cursors) p.push_back(static_cast<double>(c.size()) / total);
    return p;
}

inline std::vector<BatchItem> sample_task_size(std::vector<TaskCursor>& cursors, std::size_t b,
                                               std::mt19937_64& rng) {
    if (cursors.empty()) throw std::invalid_argument("sample_task_size: no tasks");
    std::vector<double> sizes;
    for (const auto& c : cursors) sizes.push_back(static_cast<double>(c.size()));
    std::discrete_distribution<std::size_t> pick(sizes.begin(), sizes.end());
    std::vector<BatchItem> batch;
    batch.reserve(b);
    for (std::size_t i = 0; i < b; ++i) {
        const std::size_t t = pick(rng);
        batch.push_back({t, cursors[t].next()});
    }
    return batch;
}

// Per-step record of what the sampler did.
struct SamplerTrace {
    std::vector<std::size_t> task_counts;
    std::vector<double> mean_entropy;
    double max_mean_entropy = 0.0;
    bool fallback = false;
    std::size_t scored = 0;
    std::size_t selected = 0;
};

struct SamplerStep {
    std::vector<BatchItem> batch;
    SamplerTrace trace;
};

// One batch under the given policy. Under mt_uncertainty, tasks flagged in
// exclude keep the share of slots a uniform draw would give them and the rest
// go to the most uncertain scored candidates.
inline SamplerStep next_batch(SamplerPolicy policy, std::vector<TaskCursor>& cursors, std::size_t b,
                              std::mt19937_64& rng, const ScoreFn& predict, std::size_t threads = 1,
                              const std::vector<bool>& exclude = {}) {
    SamplerStep step;
    const std::size_t T = cursors.size();
    step.trace.task_counts.assign(T, 0);
    auto finish = [&] {
        for (const auto& item : step.batch) ++step.trace.task_counts[item.task];
        step.trace.selected = step.batch.size();
        return step;
    };
    if (policy == SamplerPolicy::random) {
        step.batch = sample_random(cursors, b, rng);
        return finish();
    }
    if (policy == SamplerPolicy::task_size) {
        step.batch = sample_task_size(cursors, b, rng);
        return finish();
    }

    std::size_t reserved = 0;
    std::vector<std::size_t> reserved_tasks;
    const bool any_excluded = std::any_of(exclude.begin(), exclude.end(), [](bool e) { return e; });
    if (any_excluded) {
        std::uniform_int_distribution<std::size_t> pick(0, T - 1);
        for (std::size_t i = 0; i < b; ++i) {
            const std::size_t t = pick(rng);
            if (t < exclude.size() && exclude[t]) reserved_tasks.push_back(t);
        }
        reserved = reserved_tasks.size();
    }
    CandidatePool pool = score_pool(cursors, b, predict, threads, exclude);
    step.trace.mean_entropy = pool.mean_entropy;
    step.trace.max_mean_entropy = pool.max_mean_entropy;
    step.trace.scored = pool.candidates.size();
    if (pool.degenerate) {
        step.trace.fallback = true;
        step.batch = sample_random(cursors, b, rng);
        return finish();
    }
    for (const auto& c : select_top(pool, b - reserved)) step.batch.push_back({c.task, c.example});
    for (std::size_t t : reserved_tasks) step.batch.push_back({t, cursors[t].next()});
    return finish();
}

}  // namespace camtl
