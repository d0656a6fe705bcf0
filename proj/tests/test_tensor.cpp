#include <gtest/gtest.h>

#include <cmath>

#include "consolidator/errors.hpp"
#include "consolidator/tensor.hpp"
#include "oracles.hpp"

using namespace consolidator;

TEST(Tensor, ShapeAndRows) {
    Tensor<float> t({2, 3, 4});
    EXPECT_EQ(t.numel(), 24u);
    EXPECT_EQ(t.channels(), 4u);
    EXPECT_EQ(t.rows(), 6u);
    EXPECT_EQ(t.shape_with_channels(7), (Shape{2, 3, 7}));
    EXPECT_THROW(Tensor<float>({2, 0}), DimensionError);
    EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), DimensionError);
    EXPECT_THROW(t.reshaped({5, 5}), DimensionError);
}

TEST(Tensor, AffineExample) {
    Tensor<double> W({2, 2}, {1, 2, 3, 4});
    Tensor<double> b({2}, {1, 1});
    Tensor<double> x({2}, {1, 1});
    const auto y = affine(W, b, x);
    EXPECT_EQ(y.values(), (std::vector<double>{4, 8}));
}

TEST(Tensor, AffineShapeMismatch) {
    Tensor<double> W({2, 3});
    Tensor<double> b({2});
    EXPECT_THROW(affine(W, b, Tensor<double>({4, 2})), DimensionError);
    EXPECT_THROW(affine(W, Tensor<double>({3}), Tensor<double>({4, 3})), DimensionError);
}

TEST(Tensor, AffineMatchesOracle) {
    const auto W = oracle::randn<double>({5, 7}, 1);
    const auto b = oracle::randn<double>({5}, 2);
    const auto x = oracle::randn<double>({3, 2, 7}, 3);
    const auto y = affine(W, b, x);
    ASSERT_EQ(y.shape(), (Shape{3, 2, 5}));
    for (std::size_t r = 0; r < 6; ++r) {
        const auto want = oracle::matvec(W, &b, oracle::to_ld(x.row(r)));
        for (std::size_t e = 0; e < 5; ++e) EXPECT_NEAR(y.row(r)[e], double(want[e]), 1e-12);
    }
}

TEST(Tensor, LinearGradientsAreTransposes) {
    const auto W = oracle::randn<double>({4, 3}, 4);
    const auto x = oracle::randn<double>({5, 3}, 5);
    const auto dy = oracle::randn<double>({5, 4}, 6);
    // <dy, W x> == <W^T dy, x> == <dW, W> for dW = dy^T x
    const auto y = linear(W, x);
    const auto dx = linear_input_grad(W, dy);
    Tensor<double> dW({4, 3});
    accumulate_weight_grad(dW, x, dy);
    double a = 0, b = 0, c = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) a += y[i] * dy[i];
    for (std::size_t i = 0; i < x.numel(); ++i) b += dx[i] * x[i];
    for (std::size_t i = 0; i < W.numel(); ++i) c += dW[i] * W[i];
    EXPECT_NEAR(a, b, 1e-12);
    EXPECT_NEAR(a, c, 1e-12);

    Tensor<double> db({4});
    accumulate_bias_grad(db, dy);
    for (std::size_t e = 0; e < 4; ++e) {
        double s = 0;
        for (std::size_t r = 0; r < 5; ++r) s += dy.row(r)[e];
        EXPECT_NEAR(db[e], s, 1e-14);
    }
}

TEST(Tensor, LayerNormExample) {
    Tensor<double> x({3}, {1, 2, 3});
    Tensor<double> gamma({3}, 1.0), beta({3}, 0.0);
    const auto y = layer_norm(x, gamma, beta, 0.0);
    EXPECT_NEAR(y[0], -1.224745, 1e-5);
    EXPECT_NEAR(y[1], 0.0, 1e-12);
    EXPECT_NEAR(y[2], 1.224745, 1e-5);
}

TEST(Tensor, SoftmaxExample) {
    Tensor<double> x({2}, {0.0, std::log(3.0)});
    const auto y = softmax_rows(x);
    EXPECT_NEAR(y[0], 0.25, 1e-15);
    EXPECT_NEAR(y[1], 0.75, 1e-15);
}

TEST(Tensor, SoftmaxLargeLogitsStayFinite) {
    Tensor<float> x({3}, {1000.f, 1000.f, -1000.f});
    const auto y = softmax_rows(x);
    EXPECT_TRUE(y.all_finite());
    EXPECT_NEAR(y[0], 0.5f, 1e-6f);
}

TEST(Tensor, GeluExample) {
    EXPECT_NEAR(gelu_scalar(1.0), 0.841345, 1e-6);
    EXPECT_EQ(gelu_scalar(0.0), 0.0);
    EXPECT_NEAR(gelu_scalar(-10.0), 0.0, 1e-20);
}

TEST(Tensor, ElementwiseBackwardsMatchDifferences) {
    const double h = 1e-6;
    for (double x : {-2.0, -0.3, 0.0, 0.7, 3.0}) {
        const double fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2 * h);
        EXPECT_NEAR(gelu_derivative(x), fd, 1e-8);
    }
    const auto x = oracle::randn<double>({2, 5}, 7);
    const auto gamma = oracle::randn<double>({5}, 8);
    const auto beta = oracle::randn<double>({5}, 9);
    const auto dy = oracle::randn<double>({2, 5}, 10);
    auto loss = [&](const Tensor<double>& xi, const Tensor<double>& gi) {
        const auto y = layer_norm(xi, gi, beta);
        double s = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * dy[i];
        return s;
    };
    const auto g = layer_norm_backward(x, gamma, dy);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        auto xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        EXPECT_NEAR(g.input[i], (loss(xp, gamma) - loss(xm, gamma)) / (2 * h), 1e-7);
    }
    for (std::size_t i = 0; i < gamma.numel(); ++i) {
        auto gp = gamma, gm = gamma;
        gp[i] += h;
        gm[i] -= h;
        EXPECT_NEAR(g.gamma[i], (loss(x, gp) - loss(x, gm)) / (2 * h), 1e-7);
    }

    const auto s = softmax_rows(x);
    const auto ds = softmax_rows_backward(s, dy);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        auto xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        const auto sp = softmax_rows(xp), sm = softmax_rows(xm);
        double fd = 0;
        for (std::size_t k = 0; k < x.numel(); ++k) fd += (sp[k] - sm[k]) * dy[k];
        EXPECT_NEAR(ds[i], fd / (2 * h), 1e-8);
    }
}

TEST(Tensor, MaxAbsDiff) {
    Tensor<float> a({3}, {1, -4, 2}), b({3}, {1, -1, 2});
    EXPECT_EQ(max_abs(a), 4.0);
    EXPECT_EQ(max_abs_diff(a, b), 3.0);
    EXPECT_THROW(max_abs_diff(a, Tensor<float>({2})), DimensionError);
}
