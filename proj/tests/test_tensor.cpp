#include <gtest/gtest.h>

#include <random>

#include "camtl/finite_diff.hpp"
#include "camtl/ops.hpp"

using namespace camtl;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true) {
    return Tensor::uniform(std::move(shape), -1.0, 1.0, rng, requires_grad);
}

std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
            out[i * n + j] = acc;
        }
    return out;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    Tensor m = Tensor::matrix(2, 2, {1, 2, 3, 4});
    Tensor out = matmul(Tensor::identity(2), m);
    EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, ZeroRowAnnihilates) {
    Tensor out = matmul(Tensor::matrix(2, 2, {1, 0, 0, 0}), Tensor::matrix(2, 1, {0, 5}));
    EXPECT_EQ(out.at(0, 0), 0.0);
    EXPECT_EQ(out.at(1, 0), 0.0);
}

TEST(Matmul, MatchesTripleLoop) {
    std::mt19937_64 rng(3);
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    Tensor c = matmul(a, b);
    auto expected = naive_matmul(a, b);
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(c.at(i), expected[i], 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
    }
}

TEST(Softmax, SymmetricInputIsUniform) {
    Tensor y = softmax_lastdim(Tensor::vector({0.0, 0.0}));
    EXPECT_EQ(y.at(0), 0.5);
    EXPECT_EQ(y.at(1), 0.5);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
    Tensor y = softmax_lastdim(Tensor::vector({1000.0, 0.0}));
    EXPECT_NEAR(y.at(0), 1.0, 1e-15);
    EXPECT_NEAR(y.at(1), 0.0, 1e-15);
    EXPECT_TRUE(std::isfinite(y.at(0)));
}

TEST(Softmax, MatchesExtendedPrecisionFormula) {
    Tensor y = softmax_lastdim(Tensor::vector({1.0, 2.0, 3.0}));
    long double total = 0.0L;
    for (int i = 1; i <= 3; ++i) total += std::exp(static_cast<long double>(i));
    for (int i = 0; i < 3; ++i) {
        EXPECT_NEAR(y.at(i), static_cast<double>(std::exp(static_cast<long double>(i + 1)) / total), 1e-12);
    }
}

TEST(Softmax, RowsAreDistributions) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = Tensor::uniform({4, 7}, -20.0, 20.0, rng);
        Tensor y = softmax_lastdim(x);
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < 7; ++c) {
                const double v = y.at(r, c);
                EXPECT_GE(v, 0.0);
                EXPECT_LE(v, 1.0);
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(LayerStats, ConstantVector) {
    auto [mu, var] = layer_stats(Tensor::vector({1, 1, 1, 1}));
    EXPECT_EQ(mu.item(), 1.0);
    EXPECT_EQ(var.item(), 0.0);
}

TEST(LayerStats, SymmetricPairUsesPopulationVariance) {
    auto [mu, var] = layer_stats(Tensor::vector({1, -1}));
    EXPECT_EQ(mu.item(), 0.0);
    EXPECT_EQ(var.item(), 1.0);
}

TEST(LayerStats, MatchesWelfordOracle) {
    std::mt19937_64 rng(5);
    Tensor x = random_tensor({8}, rng, false);
    long double m = 0.0L, s = 0.0L;
    for (std::size_t i = 0; i < 8; ++i) {
        const long double v = x.at(i);
        const long double delta = v - m;
        m += delta / static_cast<long double>(i + 1);
        s += delta * (v - m);
    }
    auto [mu, var] = layer_stats(x);
    EXPECT_NEAR(mu.item(), static_cast<double>(m), 1e-12);
    EXPECT_NEAR(var.item(), static_cast<double>(s / 8.0L), 1e-12);
}

TEST(LayerStats, KeepsLeadingShape) {
    auto [mu, var] = layer_stats(Tensor::zeros({3, 5}));
    EXPECT_EQ(mu.shape(), (Shape{3}));
    EXPECT_EQ(var.shape(), (Shape{3}));
}

TEST(Backward, IdentityChain) {
    Tensor x = Tensor::scalar(3.0, true);
    backward(x);
    EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Backward, Quadratic) {
    Tensor x = Tensor::vector({1, 2, 3}, true);
    backward(sum(mul(x, x)));
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, CompositeMatchesFiniteDifferences) {
    std::mt19937_64 rng(7);
    Tensor w = random_tensor({4, 3}, rng, false);
    Tensor x = random_tensor({5, 4}, rng);
    auto f = [&](const Tensor& in) {
        Tensor h = softmax_lastdim(matmul(in, w));
        auto [mu, var] = layer_stats(h);
        return sum(add(mul(mu, mu), var));
    };
    EXPECT_LT(finite_diff_check(f, x, 1e-5), 1e-4);
}

TEST(Backward, RejectsNonScalar) {
    Tensor x = Tensor::vector({1, 2}, true);
    EXPECT_THROW(backward(scale(x, 2.0)), UsageError);
}

TEST(Backward, RejectsDetachedTensor) {
    Tensor x = Tensor::vector({1, 2}, false);
    EXPECT_THROW(backward(sum(x)), UsageError);
}

TEST(Backward, SecondPassOnSameGraphIsAnError) {
    Tensor x = Tensor::vector({1, 2}, true);
    Tensor y = sum(mul(x, x));
    backward(y);
    EXPECT_THROW(backward(y), UsageError);
}

TEST(Backward, FanOutAccumulates) {
    Tensor x = Tensor::vector({1, 2}, true);
    backward(sum(add(scale(x, 3.0), mul(x, x))));
    EXPECT_EQ(x.grad()[0], 5.0);
    EXPECT_EQ(x.grad()[1], 7.0);
}

TEST(Backward, FrozenTensorGetsNoGrad) {
    Tensor frozen = Tensor::vector({1, 2}, false);
    Tensor x = Tensor::vector({3, 4}, true);
    backward(sum(mul(frozen, x)));
    EXPECT_FALSE(frozen.has_grad());
    EXPECT_TRUE(x.has_grad());
}

TEST(Backward, SiblingOrderDoesNotChangeGradientBits) {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor({6}, rng);
        std::vector<double> factors(5);
        for (auto& f : factors) f = std::uniform_real_distribution<double>(-3, 3)(rng);
        auto run = [&](bool reversed) {
            x.zero_grad();
            std::vector<Tensor> terms;
            for (double f : factors) terms.push_back(sum(mul(scale(x, f), tanh(x))));
            if (reversed) std::reverse(terms.begin(), terms.end());
            Tensor total = terms.front();
            for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
            backward(total);
            return std::vector<double>(x.grad().begin(), x.grad().end());
        };
        EXPECT_EQ(run(false), run(true));
    }
}

TEST(Tape, RecordsInputsBeforeConsumers) {
    Tensor x = Tensor::vector({1, 2}, true);
    Tensor a = scale(x, 2.0);
    Tensor b = mul(a, x);
    Tensor y = sum(b);
    Tape tape = Tape::record(y);
    EXPECT_EQ(tape.size(), 4u);
    EXPECT_LT(tape.position(x), tape.position(a));
    EXPECT_LT(tape.position(a), tape.position(b));
    EXPECT_LT(tape.position(b), tape.position(y));
}

TEST(NoGrad, SkipsRecording) {
    Tensor x = Tensor::vector({1, 2}, true);
    NoGradGuard guard;
    Tensor y = sum(x);
    EXPECT_FALSE(y.requires_grad());
}

TEST(FiniteDiff, LinearFunctionIsExact) {
    Tensor x = Tensor::vector({0.3, -0.7, 2.0});
    EXPECT_LT(finite_diff_check([](const Tensor& t) { return sum(t); }, x, 1e-5), 1e-6);
}

TEST(FiniteDiff, QuadraticIsExactToStepSquared) {
    Tensor x = Tensor::vector({1, 2});
    EXPECT_LT(finite_diff_check([](const Tensor& t) { return sum(mul(t, t)); }, x, 1e-5), 1e-8);
}

TEST(FiniteDiff, DetectsNonDeterministicFunction) {
    Tensor x = Tensor::vector({1, 2});
    int calls = 0;
    auto f = [&](const Tensor& t) { return add_scalar(sum(t), static_cast<double>(++calls)); };
    EXPECT_THROW(finite_diff_check(f, x, 1e-5), OracleError);
}

TEST(FiniteDiff, RestoresInputAndRequiresGrad) {
    Tensor x = Tensor::vector({0.5, 0.25});
    finite_diff_check([](const Tensor& t) { return sum(exp(t)); }, x, 1e-5);
    EXPECT_EQ(x.at(0), 0.5);
    EXPECT_EQ(x.at(1), 0.25);
    EXPECT_FALSE(x.requires_grad());
}

// Every differentiable op against central differences on random inputs.
TEST(OpGradients, AllOpsPassFiniteDifferences) {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({3, 4}, rng);
        Tensor w = random_tensor({4, 2}, rng);
        Tensor v4 = random_tensor({4}, rng);
        Tensor v3 = random_tensor({3}, rng);
        Tensor pos = Tensor::uniform({3, 4}, 0.5, 1.5, rng, true);
        const std::vector<int> ids{2, 0, 2, 1};
        const std::vector<std::pair<std::string, std::function<Tensor(const Tensor&)>>> cases = {
            {"matmul", [&](const Tensor& t) { return sum(square(matmul(t, w))); }},
            {"transpose", [&](const Tensor& t) { return sum(mul(transpose(t), transpose(b))); }},
            {"reshape", [&](const Tensor& t) { return sum(square(reshape(t, {2, 6}))); }},
            {"add_sub", [&](const Tensor& t) { return sum(square(sub(add(t, b), mul(b, b)))); }},
            {"mul", [&](const Tensor& t) { return sum(mul(mul(t, b), t)); }},
            {"div", [&](const Tensor& t) { return sum(div(t, pos)); }},
            {"broadcast_rows", [&](const Tensor& t) { return sum(square(add(t, broadcast_rows(v4, 3)))); }},
            {"broadcast_cols", [&](const Tensor& t) { return sum(square(mul(t, broadcast_cols(v3, 4)))); }},
            {"exp_log_sqrt", [&](const Tensor& t) { return sum(log(add_scalar(sqrt(add_scalar(square(t), 1.0)), 0.5))); }},
            {"tanh_sigmoid", [&](const Tensor& t) { return sum(mul(tanh(t), sigmoid(t))); }},
            {"gelu", [&](const Tensor& t) { return sum(square(gelu(scale(t, 2.0)))); }},
            {"softmax", [&](const Tensor& t) { return sum(mul(softmax_lastdim(t), b)); }},
            {"layer_stats", [&](const Tensor& t) { auto [m, s] = layer_stats(t); return sum(add(square(m), s)); }},
            {"normalize_rows", [&](const Tensor& t) { return sum(mul(normalize_rows(t, 1e-12), b)); }},
            {"slice_concat", [&](const Tensor& t) { return sum(square(concat_cols({slice_cols(t, 2, 2), slice_cols(t, 0, 1)}))); }},
            {"select_row", [&](const Tensor& t) { return sum(square(select_row(t, 1))); }},
            {"gather_rows", [&](const Tensor& t) { return sum(square(gather_rows(t, ids))); }},
            {"cross_entropy", [&](const Tensor& t) { return cross_entropy(select_row(t, 2), 1); }},
            {"squared_error", [&](const Tensor& t) { return squared_error(reshape(sum(t), {1}), 0.3); }},
            {"mean", [&](const Tensor& t) { return mean(square(t)); }},
        };
        for (const auto& [name, f] : cases) {
            Tensor x = a.detach();
            EXPECT_LT(finite_diff_check(f, x, 1e-5), 1e-4) << name;
        }
    }
}

TEST(TensorInvariants, DataLengthMustMatchShape) {
    EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
    EXPECT_THROW(assert_finite(Tensor::vector({1.0, std::numeric_limits<double>::infinity()})), NumericError);
}
