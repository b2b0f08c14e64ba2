#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <tuple>

#include "camtl/sampler.hpp"

using namespace camtl;

namespace {

std::shared_ptr<const Dataset> dataset(std::size_t n, const std::string& name = "d") {
    auto d = std::make_shared<Dataset>();
    d->name = name;
    for (std::size_t i = 0; i < n; ++i) d->examples.push_back({{1, static_cast<int>(i)}, 0.0});
    return d;
}

std::vector<TaskCursor> cursors_of(const std::vector<std::size_t>& sizes, const std::vector<std::size_t>& classes = {}) {
    std::vector<TaskCursor> out;
    for (std::size_t t = 0; t < sizes.size(); ++t) {
        out.emplace_back("t" + std::to_string(t), dataset(sizes[t]), classes.empty() ? 2 : classes[t], false, 100 + t);
    }
    return out;
}

ScoreFn uniform_predictor(const std::vector<TaskCursor>& cursors) {
    return [&cursors](std::size_t t, std::span<const std::size_t> ex) {
        const std::size_t c = cursors[t].classes();
        return std::vector<std::vector<double>>(ex.size(), std::vector<double>(c, 1.0 / static_cast<double>(c)));
    };
}

// Binary distribution with the given entropy ordering: p in [0.5, 1].
std::vector<double> binary(double p) { return {p, 1.0 - p}; }

// Selection by repeated linear scan for the lexicographic maximum of
// (U, -task, -draw).
std::vector<std::pair<std::size_t, std::size_t>> brute_force_top(std::vector<Candidate> all, std::size_t b) {
    std::vector<std::pair<std::size_t, std::size_t>> picked;
    std::vector<bool> used(all.size(), false);
    for (std::size_t k = 0; k < std::min(b, all.size()); ++k) {
        std::size_t best = all.size();
        for (std::size_t i = 0; i < all.size(); ++i) {
            if (used[i]) continue;
            if (best == all.size()) {
                best = i;
                continue;
            }
            auto key = [&](std::size_t j) {
                return std::make_tuple(all[j].uncertainty, -static_cast<long>(all[j].task), -static_cast<long>(all[j].draw));
            };
            if (key(i) > key(best)) best = i;
        }
        used[best] = true;
        picked.emplace_back(all[best].task, all[best].draw);
    }
    return picked;
}

double binomial_sigma(double p, double n) { return std::sqrt(p * (1 - p) / n); }

}  // namespace

TEST(Entropy, Examples) {
    EXPECT_EQ(shannon_entropy(std::vector<double>{1, 0}), 0.0);
    EXPECT_NEAR(shannon_entropy(std::vector<double>{0.5, 0.5}), 0.6931471805599453, 1e-15);
    const double oracle = -(0.7 * std::log(0.7) + 0.2 * std::log(0.2) + 0.1 * std::log(0.1));
    EXPECT_NEAR(shannon_entropy(std::vector<double>{0.7, 0.2, 0.1}), oracle, 1e-12);
}

TEST(Entropy, InvalidDistributions) {
    EXPECT_THROW(shannon_entropy(std::vector<double>{0.5, 0.4}), std::invalid_argument);
    EXPECT_THROW(shannon_entropy(std::vector<double>{1.2, -0.2}), std::invalid_argument);
    EXPECT_THROW(shannon_entropy(std::vector<double>{}), std::invalid_argument);
    EXPECT_THROW(shannon_entropy(std::vector<double>{NAN, 1.0}), std::invalid_argument);
}

TEST(Entropy, MaxEntropyMatchesUniform) {
    EXPECT_EQ(max_entropy_uniform(2), std::log(2.0));
    EXPECT_EQ(max_entropy_uniform(3), std::log(3.0));
    for (std::size_t c = 2; c <= 10; ++c) {
        std::vector<double> u(c, 1.0 / static_cast<double>(c));
        EXPECT_NEAR(shannon_entropy(u), max_entropy_uniform(c), 1e-12);
    }
    EXPECT_THROW(max_entropy_uniform(1), std::invalid_argument);
}

TEST(Entropy, BoundedByLogC) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t c = 2 + rng() % 8;
        std::vector<double> p(c);
        double total = 0;
        for (auto& v : p) total += (v = std::uniform_real_distribution<double>(0, 1)(rng));
        for (auto& v : p) v /= total;
        const double h = shannon_entropy(p);
        EXPECT_GE(h, 0.0);
        EXPECT_LE(h, std::log(static_cast<double>(c)) + 1e-12);
    }
}

TEST(Cursor, ReloadsWhenExhausted) {
    TaskCursor c("a", dataset(3), 2, false, 7);
    std::set<std::size_t> first;
    for (int i = 0; i < 3; ++i) first.insert(c.next());
    EXPECT_EQ(first, (std::set<std::size_t>{0, 1, 2}));
    EXPECT_EQ(c.reload_count(), 0u);
    c.next();
    EXPECT_EQ(c.reload_count(), 1u);
    EXPECT_EQ(c.drawn(), 4u);
    EXPECT_THROW(TaskCursor("e", dataset(0), 2, false, 1), std::invalid_argument);
}

TEST(ScorePool, SingleUniformTask) {
    auto cursors = cursors_of({10});
    auto pool = score_pool(cursors, 4, uniform_predictor(cursors));
    ASSERT_EQ(pool.candidates.size(), 4u);
    EXPECT_NEAR(pool.max_mean_entropy, std::log(2.0), 1e-15);
    for (const auto& c : pool.candidates) EXPECT_NEAR(c.uncertainty, 1.0 / std::log(2.0), 1e-12);
}

TEST(ScorePool, ClassCountNormalisationCancels) {
    for (auto classes : {std::vector<std::size_t>{2, 10}, std::vector<std::size_t>{2, 3, 10}}) {
        auto cursors = cursors_of(std::vector<std::size_t>(classes.size(), 20), classes);
        auto pool = score_pool(cursors, 5, uniform_predictor(cursors));
        const double u0 = pool.candidates.front().uncertainty;
        for (const auto& c : pool.candidates) EXPECT_NEAR(c.uncertainty, u0, 1e-12);
        auto top = select_top_b(pool);
        for (std::size_t i = 0; i < top.size(); ++i) {
            EXPECT_EQ(top[i].task, 0u);
            EXPECT_EQ(top[i].draw, i);
        }
    }
}

TEST(ScorePool, CursorsAdvanceByB) {
    auto cursors = cursors_of({50, 60, 70});
    auto pool = score_pool(cursors, 8, uniform_predictor(cursors));
    for (const auto& c : cursors) EXPECT_EQ(c.position(), 8u);
    EXPECT_EQ(pool.candidates.size(), 24u);
    EXPECT_EQ(select_top_b(pool).size(), 8u);
}

TEST(ScorePool, CertainPredictionsAreDegenerate) {
    auto cursors = cursors_of({10, 10});
    ScoreFn certain = [](std::size_t, std::span<const std::size_t> ex) {
        return std::vector<std::vector<double>>(ex.size(), std::vector<double>{1.0, 0.0});
    };
    EXPECT_TRUE(score_pool(cursors, 3, certain).degenerate);
    std::mt19937_64 rng(1);
    auto step = next_batch(SamplerPolicy::mt_uncertainty, cursors, 3, rng, certain);
    EXPECT_TRUE(step.trace.fallback);
    EXPECT_EQ(step.batch.size(), 3u);
}

TEST(ScorePool, ThreadedScoringMatchesSerial) {
    std::mt19937_64 noise(3);
    std::vector<std::vector<double>> table(40);
    for (auto& row : table) row = binary(std::uniform_real_distribution<double>(0.5, 1.0)(noise));
    ScoreFn predict = [&table](std::size_t, std::span<const std::size_t> ex) {
        std::vector<std::vector<double>> out;
        for (auto e : ex) out.push_back(table[e]);
        return out;
    };
    auto a = cursors_of({40, 40, 40, 40});
    auto b = cursors_of({40, 40, 40, 40});
    auto pa = score_pool(a, 6, predict, 1);
    auto pb = score_pool(b, 6, predict, 3);
    ASSERT_EQ(pa.candidates.size(), pb.candidates.size());
    for (std::size_t i = 0; i < pa.candidates.size(); ++i) {
        EXPECT_EQ(pa.candidates[i].example, pb.candidates[i].example);
        EXPECT_EQ(pa.candidates[i].uncertainty, pb.candidates[i].uncertainty);
    }
}

TEST(SelectTopB, SingleTaskReturnsEverything) {
    CandidatePool pool;
    pool.b = 3;
    pool.candidates = {{0, 0, 0, 0, 0.3}, {0, 1, 1, 0, 0.9}, {0, 2, 2, 0, 0.1}};
    EXPECT_EQ(select_top_b(pool).size(), 3u);
}

TEST(SelectTopB, TwoTaskExample) {
    CandidatePool pool;
    pool.b = 2;
    pool.candidates = {{0, 0, 0, 0, 0.9}, {0, 1, 1, 0, 0.1}, {1, 0, 0, 0, 0.8}, {1, 1, 1, 0, 0.7}};
    auto top = select_top_b(pool);
    ASSERT_EQ(top.size(), 2u);
    EXPECT_EQ(std::make_pair(top[0].task, top[0].draw), std::make_pair(std::size_t{0}, std::size_t{0}));
    EXPECT_EQ(std::make_pair(top[1].task, top[1].draw), std::make_pair(std::size_t{1}, std::size_t{0}));
}

TEST(SelectTopB, MatchesBruteForceIncludingTies) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t T = 1 + rng() % 5, b = 1 + rng() % 8;
        CandidatePool pool;
        pool.b = b;
        const bool ties = trial % 2 == 0;
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t i = 0; i < b; ++i) {
                const double u = ties ? static_cast<double>(rng() % 3) / 2.0
                                      : std::uniform_real_distribution<double>(0, 2)(rng);
                pool.candidates.push_back({t, i, rng() % 100, 0.0, u});
            }
        std::shuffle(pool.candidates.begin(), pool.candidates.end(), rng);
        auto top = select_top_b(pool);
        auto oracle = brute_force_top(pool.candidates, b);
        ASSERT_EQ(top.size(), oracle.size());
        for (std::size_t k = 0; k < top.size(); ++k) {
            EXPECT_EQ(std::make_pair(top[k].task, top[k].draw), oracle[k]);
        }
    }
}

TEST(SelectTopB, MonotoneInEntropy) {
    // Sharpening a prediction never raises its uncertainty.
    double previous = INFINITY;
    for (double p : {0.5, 0.6, 0.7, 0.8, 0.9, 0.99}) {
        auto local = cursors_of({20, 20});
        ScoreFn predict = [p](std::size_t t, std::span<const std::size_t> ex) {
            std::vector<std::vector<double>> out(ex.size(), binary(0.6));
            if (t == 1) out[0] = binary(p);
            return out;
        };
        auto pool = score_pool(local, 4, predict);
        double mine = 0;
        for (const auto& c : pool.candidates) {
            if (c.task == 1 && c.draw == 0) mine = c.entropy;
        }
        EXPECT_LE(mine, previous);
        previous = mine;
    }
}

TEST(SelectTopB, RegressionBinsMatchBinaryTask) {
    auto pseudo = regression_pseudo_distribution(0.8, 0.0, 1.0);
    EXPECT_NEAR(pseudo[0] + pseudo[1], 1.0, 1e-15);
    auto mid = regression_pseudo_distribution(0.5, 0.0, 1.0);
    EXPECT_EQ(mid[0], 0.5);
    std::vector<TaskCursor> cursors;
    cursors.emplace_back("cls", dataset(10), 2, false, 1);
    cursors.emplace_back("reg", dataset(10), 2, true, 2);
    ScoreFn predict = [&](std::size_t, std::span<const std::size_t> ex) {
        return std::vector<std::vector<double>>(ex.size(), pseudo);
    };
    auto pool = score_pool(cursors, 3, predict);
    for (const auto& c : pool.candidates) EXPECT_EQ(c.uncertainty, pool.candidates[0].uncertainty);
}

TEST(Policies, RandomSingleTask) {
    auto cursors = cursors_of({10});
    std::mt19937_64 rng(5);
    for (const auto& item : sample_random(cursors, 16, rng)) EXPECT_EQ(item.task, 0u);
}

TEST(Policies, RandomIsUniformOverTasks) {
    auto cursors = cursors_of({50, 50, 50, 50});
    std::mt19937_64 rng(6);
    const double n = 100000;
    std::vector<double> counts(4, 0.0);
    for (const auto& item : sample_random(cursors, static_cast<std::size_t>(n), rng)) counts[item.task] += 1;
    for (double c : counts) EXPECT_LE(std::abs(c / n - 0.25), 3 * binomial_sigma(0.25, n));
}

TEST(Policies, RandomIsDeterministicPerSeed) {
    auto a = cursors_of({30, 30, 30});
    auto b = cursors_of({30, 30, 30});
    std::mt19937_64 ra(7), rb(7);
    for (int step = 0; step < 20; ++step) EXPECT_EQ(sample_random(a, 8, ra), sample_random(b, 8, rb));
}

TEST(Policies, TaskSizeProbabilities) {
    auto cursors = cursors_of({100, 300});
    auto p = task_size_probabilities(cursors);
    EXPECT_EQ(p, (std::vector<double>{0.25, 0.75}));
    auto equal = task_size_probabilities(cursors_of({40, 40, 40}));
    for (double v : equal) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Policies, TaskSizeFrequencies) {
    for (auto sizes : {std::vector<std::size_t>{100, 300}, std::vector<std::size_t>{1, 999}}) {
        auto cursors = cursors_of(sizes);
        auto p = task_size_probabilities(cursors);
        std::mt19937_64 rng(8);
        const double n = 100000;
        double small = 0;
        for (const auto& item : sample_task_size(cursors, static_cast<std::size_t>(n), rng)) small += item.task == 0;
        EXPECT_LE(std::abs(small / n - p[0]), 3 * binomial_sigma(p[0], n));
    }
}

TEST(NextBatch, ConservesSamplesAndDiscardsUnselected) {
    auto cursors = cursors_of({100, 100, 100});
    std::mt19937_64 rng(9);
    std::mt19937_64 noise(10);
    ScoreFn predict = [&noise](std::size_t, std::span<const std::size_t> ex) {
        std::vector<std::vector<double>> out;
        for (std::size_t i = 0; i < ex.size(); ++i) out.push_back(binary(std::uniform_real_distribution<double>(0.5, 1)(noise)));
        return out;
    };
    auto step = next_batch(SamplerPolicy::mt_uncertainty, cursors, 8, rng, predict);
    EXPECT_EQ(step.batch.size(), 8u);
    EXPECT_EQ(step.trace.scored, 24u);
    std::size_t advanced = 0;
    for (const auto& c : cursors) advanced += c.position();
    EXPECT_EQ(advanced, 24u);
    std::size_t counted = 0;
    for (auto c : step.trace.task_counts) counted += c;
    EXPECT_EQ(counted, 8u);
}

TEST(NextBatch, ExcludedTaskFilledByRandomShare) {
    auto cursors = cursors_of({100, 100});
    std::mt19937_64 rng(11);
    ScoreFn predict = [](std::size_t t, std::span<const std::size_t> ex) {
        EXPECT_EQ(t, 0u);
        return std::vector<std::vector<double>>(ex.size(), binary(0.7));
    };
    std::size_t excluded_total = 0;
    for (int step = 0; step < 200; ++step) {
        auto s = next_batch(SamplerPolicy::mt_uncertainty, cursors, 8, rng, predict, 1, {false, true});
        EXPECT_EQ(s.batch.size(), 8u);
        excluded_total += s.trace.task_counts[1];
    }
    const double frac = static_cast<double>(excluded_total) / (200.0 * 8.0);
    EXPECT_NEAR(frac, 0.5, 3 * binomial_sigma(0.5, 1600));
}

TEST(NextBatch, PolicyParsing) {
    EXPECT_EQ(parse_policy("random"), SamplerPolicy::random);
    EXPECT_EQ(to_string(parse_policy("mt_uncertainty")), "mt_uncertainty");
    EXPECT_THROW(parse_policy("bogus"), std::invalid_argument);
}
