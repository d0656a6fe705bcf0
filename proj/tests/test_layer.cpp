#include <gtest/gtest.h>

#include <cmath>

#include "consolidator/errors.hpp"
#include "consolidator/layer.hpp"
#include "oracles.hpp"

using namespace consolidator;

TEST(Layer, InitExamples) {
    auto l = init_layer<float>("fc1", Tensor<float>({3072, 768}), Tensor<float>({3072}), {96, 192}, 0.1);
    ASSERT_EQ(l.branches.size(), 2u);
    EXPECT_EQ(l.branches[0].weight.numel(), 24576u);
    EXPECT_EQ(l.branches[1].weight.numel(), 12288u);
    EXPECT_EQ(l.groups(), (std::vector<std::size_t>{96, 192}));
    EXPECT_THROW(init_layer<float>("x", Tensor<float>({768, 768}), Tensor<float>({768}), {5}, 0.0),
                 GroupDivisibilityError);
    EXPECT_THROW(init_layer<float>("x", Tensor<float>({4, 4}), Tensor<float>({3}), {2}, 0.0), DimensionError);
    EXPECT_THROW(init_layer<float>("x", Tensor<float>({4, 4}), Tensor<float>({4}), {2}, 1.5), std::invalid_argument);
}

TEST(Layer, ZeroInitEvalEqualsFrozenFC) {
    const auto W = oracle::randn<float>({768, 768}, 1);
    const auto b = oracle::randn<float>({768}, 2);
    const auto l = init_layer<float>("q", W, b, {384}, 0.0);
    const auto x = oracle::randn<float>({2, 3, 768}, 3);
    EXPECT_EQ(forward_eval(l, x), affine(W, b, x));
}

TEST(Layer, EvalMatchesDefinitionOracle) {
    for (auto groups : std::vector<std::vector<std::size_t>>{{1}, {2, 4}, {4}, {4, 2, 1}}) {
        const auto l = oracle::random_layer<double>(8, 12, groups, 10 + groups.size());
        const auto x = oracle::randn<double>({4, 8}, 5);
        const auto y = forward_eval(l, x);
        for (std::size_t r = 0; r < 4; ++r) {
            const auto want = oracle::layer_forward(l, oracle::to_ld(x.row(r)));
            for (std::size_t e = 0; e < 12; ++e) EXPECT_NEAR(y.row(r)[e], double(want[e]), 1e-12);
        }
    }
}

TEST(Layer, SingleDiagonalBranchOnBasisVector) {
    const std::size_t D = 6;
    auto l = init_layer<double>("fc", oracle::randn<double>({D, D}, 1), oracle::randn<double>({D}, 2), {D}, 0.0);
    for (std::size_t k = 0; k < D; ++k) l.branches[0].weight[k] = double(k + 1);
    for (std::size_t k = 0; k < D; ++k) {
        Tensor<double> x({D});
        x[k] = 1.0;
        auto want = affine(l.base_weight, l.base_bias, x);
        // g = D: one-channel groups, reorder is the identity
        want[k] += double(k + 1);
        EXPECT_LE(max_abs_diff(forward_eval(l, x), want), 1e-15);
    }
}

TEST(Layer, UnshuffledAblationSkipsReorder) {
    LayerOptions opt;
    opt.reorder = false;
    const auto l = oracle::random_layer<double>(8, 8, {2}, 3, 0.0, opt);
    EXPECT_EQ(l.branches[0].shuffle_groups, 1u);
    const auto x = oracle::randn<double>({8}, 4);
    const auto want = oracle::layer_forward(l, oracle::to_ld(x.data()));
    const auto y = forward_eval(l, x);
    for (std::size_t e = 0; e < 8; ++e) EXPECT_NEAR(y[e], double(want[e]), 1e-12);
}

TEST(Layer, DroppathZeroTrainEqualsEval) {
    const auto l = oracle::random_layer<float>(16, 16, {2, 4}, 5, 0.0);
    const auto x = oracle::randn<float>({7, 16}, 6);
    for (std::uint64_t s = 0; s < 5; ++s) {
        Rng rng(s);
        EXPECT_EQ(forward_train(l, x, rng), forward_eval(l, x));
    }
}

TEST(Layer, DroppathOneIsFrozenPath) {
    const auto l = oracle::random_layer<float>(16, 16, {2, 4}, 5, 1.0);
    const auto x = oracle::randn<float>({7, 16}, 6);
    Rng rng(3);
    EXPECT_EQ(forward_train(l, x, rng), affine(l.base_weight, l.base_bias, x));
    const auto scales = draw_droppath_scales(1.0, 5, rng);
    for (double s : scales) EXPECT_EQ(s, 0.0);
}

TEST(Layer, DroppathKeptSampleIsScaledByInverse) {
    const auto l = oracle::random_layer<double>(8, 8, {2, 4}, 9, 0.5);
    const auto x = oracle::randn<double>({2, 8}, 1);
    const std::vector<double> scales{2.0, 0.0};
    const auto y = forward(l, x, scales);
    const auto base = affine(l.base_weight, l.base_bias, x);
    const auto sum = branch_sum(l, x);
    for (std::size_t e = 0; e < 8; ++e) {
        EXPECT_NEAR(y.row(0)[e], base.row(0)[e] + 2.0 * sum.row(0)[e], 1e-14);
        EXPECT_EQ(y.row(1)[e], base.row(1)[e]);
    }
}

TEST(Layer, DroppathMaskIsPerSample) {
    Rng rng(11);
    const auto s = draw_droppath_scales(0.5, 4000, rng);
    std::size_t kept = 0;
    for (double v : s) {
        EXPECT_TRUE(v == 0.0 || v == 2.0);
        kept += v != 0.0;
    }
    EXPECT_NEAR(double(kept) / 4000.0, 0.5, 0.04);
    EXPECT_THROW(draw_droppath_scales(-0.1, 1, rng), std::invalid_argument);
}

TEST(Layer, DroppathMonteCarloMeanIsEval) {
    const auto l = oracle::random_layer<double>(8, 8, {2, 4}, 12, 0.5);
    const auto x = oracle::randn<double>({8}, 13);
    const auto eval = forward_eval(l, x);
    const std::size_t n = 10000;
    std::vector<double> mean(8, 0.0), sq(8, 0.0);
    Rng rng(14);
    for (std::size_t i = 0; i < n; ++i) {
        const auto y = forward_train(l, x, rng);
        for (std::size_t e = 0; e < 8; ++e) {
            mean[e] += y[e];
            sq[e] += y[e] * y[e];
        }
    }
    for (std::size_t e = 0; e < 8; ++e) {
        const double m = mean[e] / n;
        const double se = std::sqrt((sq[e] / n - m * m) / n);
        EXPECT_LE(std::abs(m - eval[e]), 3 * se + 1e-12) << e;
    }
}

TEST(Layer, BackwardMatchesDifferencesAndLeavesBaseWeight) {
    auto l = oracle::random_layer<double>(8, 12, {2, 4}, 21, 0.5);
    l.unstructured.push_back([] {
        Rng r(3);
        return make_unstructured_branch<double>(20, 8, 12, r);
    }());
    oracle::randomize(l, 22);
    const auto x = oracle::randn<double>({3, 8}, 23);
    const auto dy = oracle::randn<double>({3, 12}, 24);
    const std::vector<double> scales{2.0, 0.0, 2.0};
    auto loss = [&](const ConsolidatorLayer<double>& li, const Tensor<double>& xi) {
        const auto y = forward(li, xi, scales);
        double s = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * dy[i];
        return s;
    };
    auto grad = zeros_like(l);
    const auto dx = backward(l, x, scales, dy, grad);
    const double h = 1e-6;
    auto check = [&](auto pick_value, auto pick_grad, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            auto p = l, m = l;
            pick_value(p)[i] += h;
            pick_value(m)[i] -= h;
            EXPECT_NEAR(pick_grad(grad)[i], (loss(p, x) - loss(m, x)) / (2 * h), 1e-7);
        }
    };
    check([](auto& L) -> Tensor<double>& { return L.base_bias; },
          [](auto& L) -> Tensor<double>& { return L.base_bias; }, 12);
    for (std::size_t b = 0; b < 2; ++b) {
        check([b](auto& L) -> Tensor<double>& { return L.branches[b].weight; },
              [b](auto& L) -> Tensor<double>& { return L.branches[b].weight; }, l.branches[b].weight.numel());
        check([b](auto& L) -> Tensor<double>& { return L.branches[b].bias; },
              [b](auto& L) -> Tensor<double>& { return L.branches[b].bias; }, 12);
    }
    for (auto i : l.unstructured[0].support) {
        auto p = l, m = l;
        p.unstructured[0].weight[i] += h;
        m.unstructured[0].weight[i] -= h;
        EXPECT_NEAR(grad.unstructured[0].weight[i], (loss(p, x) - loss(m, x)) / (2 * h), 1e-7);
    }
    for (std::size_t i = 0; i < grad.unstructured[0].weight.numel(); ++i) {
        if (!std::binary_search(l.unstructured[0].support.begin(), l.unstructured[0].support.end(), i)) {
            EXPECT_EQ(grad.unstructured[0].weight[i], 0.0);
        }
    }
    for (std::size_t i = 0; i < x.numel(); ++i) {
        auto p = x, m = x;
        p[i] += h;
        m[i] -= h;
        EXPECT_NEAR(dx[i], (loss(l, p) - loss(l, m)) / (2 * h), 1e-7);
    }
    for (auto v : grad.base_weight.data()) EXPECT_EQ(v, 0.0);
}

TEST(Layer, FrozenBaseBiasGetsNoGradient) {
    LayerOptions opt;
    opt.tune_base_bias = false;
    const auto l = oracle::random_layer<double>(4, 4, {2}, 1, 0.0, opt);
    auto grad = zeros_like(l);
    backward(l, oracle::randn<double>({2, 4}, 2), {}, oracle::randn<double>({2, 4}, 3), grad);
    for (auto v : grad.base_bias.data()) EXPECT_EQ(v, 0.0);
}

TEST(Unstructured, SupportSizeAndDeterminism) {
    Rng a(5), b(5);
    const auto u = make_unstructured_branch<float>(1536, 768, 768, a);
    const auto v = make_unstructured_branch<float>(1536, 768, 768, b);
    EXPECT_EQ(u.support.size(), 1536u);
    EXPECT_EQ(u.support, v.support);
    EXPECT_TRUE(std::is_sorted(u.support.begin(), u.support.end()));
    EXPECT_EQ(std::adjacent_find(u.support.begin(), u.support.end()), u.support.end());
    Rng c(6);
    EXPECT_EQ(make_unstructured_branch<float>(12, 3, 4, c).support.size(), 12u);
    EXPECT_THROW(make_unstructured_branch<float>(0, 3, 4, c), std::invalid_argument);
    EXPECT_THROW(make_unstructured_branch<float>(13, 3, 4, c), std::invalid_argument);
}
