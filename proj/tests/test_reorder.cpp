#include <gtest/gtest.h>

#include <numeric>

#include "consolidator/errors.hpp"
#include "consolidator/reorder.hpp"
#include "oracles.hpp"

using namespace consolidator;

TEST(Reorder, ExampleSixChannelsTwoGroups) {
    Tensor<float> x({6}, {0, 1, 2, 3, 4, 5});
    EXPECT_EQ(channel_reorder(2, x).values(), (std::vector<float>{0, 3, 1, 4, 2, 5}));
    EXPECT_EQ(reorder_permutation(2, 6).map(), (std::vector<std::size_t>{0, 3, 1, 4, 2, 5}));
}

TEST(Reorder, TrivialGroupCountsAreIdentity) {
    for (std::size_t D : {1u, 5u, 12u}) {
        EXPECT_TRUE(reorder_permutation(1, D).is_identity());
        EXPECT_TRUE(reorder_permutation(D, D).is_identity());
    }
}

TEST(Reorder, RejectsNonDivisor) {
    EXPECT_THROW(reorder_permutation(4, 6), GroupDivisibilityError);
    EXPECT_THROW(reorder_permutation(0, 6), GroupDivisibilityError);
}

TEST(Reorder, MatchesReshapeTransposeOracle) {
    for (std::size_t D = 1; D <= 64; ++D) {
        std::vector<std::size_t> idx(D);
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t g = 1; g <= D; ++g) {
            if (D % g) continue;
            EXPECT_EQ(reorder_permutation(g, D).map(), oracle::shuffle(g, idx)) << "g=" << g << " D=" << D;
        }
    }
}

TEST(Reorder, InverseIsReorderByQuotientExhaustive) {
    for (std::size_t D = 1; D <= 64; ++D) {
        for (std::size_t g = 1; g <= D; ++g) {
            if (D % g) continue;
            const auto p = reorder_permutation(g, D);
            EXPECT_TRUE(p.then(reorder_permutation(D / g, D)).is_identity()) << g << "/" << D;
            EXPECT_EQ(p.inverse(), reorder_permutation(D / g, D));
            const auto x = oracle::randn<float>({3, D}, D * 100 + g);
            EXPECT_EQ(inverse_reorder(g, channel_reorder(g, x)), x);
        }
    }
}

TEST(Reorder, ScatterIsTransposeOfGather) {
    const auto p = reorder_permutation(3, 12);
    const auto x = oracle::randn<double>({2, 12}, 1);
    const auto y = oracle::randn<double>({2, 12}, 2);
    const auto px = permute_channels(p, x);
    const auto sy = scatter_channels(p, y);
    double a = 0, b = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        a += px[i] * y[i];
        b += x[i] * sy[i];
    }
    EXPECT_DOUBLE_EQ(a, b);
}

TEST(Reorder, PermutationValidation) {
    EXPECT_THROW(Permutation({0, 0, 1}), std::invalid_argument);
    EXPECT_THROW(Permutation({0, 3}), std::invalid_argument);
    EXPECT_NO_THROW(Permutation({2, 0, 1}));
}

TEST(Compact, BlockDiagonalExample) {
    auto br = make_gc_branch<double>(2, 4, 4);
    // W1 = [[1,2],[3,4]], W2 = [[5,6],[7,8]]
    br.weight = Tensor<double>({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    const auto c = compact(br, 4, 4);
    EXPECT_EQ(c.values(), (std::vector<double>{1, 2, 0, 0, 3, 4, 0, 0, 0, 0, 5, 6, 0, 0, 7, 8}));
}

TEST(Compact, SupportListsBlocks) {
    const auto s = compact_support(2, 4, 6);
    ASSERT_EQ(s.size(), 12u);
    EXPECT_EQ(s.front(), (std::pair<std::size_t, std::size_t>{0, 0}));
    EXPECT_EQ(s.back(), (std::pair<std::size_t, std::size_t>{3, 5}));
    for (auto [r, c] : s) EXPECT_EQ(r / 2, c / 3);
}

TEST(Compact, ScatteredCompactActsOnRawInput) {
    for (std::size_t g : {2u, 4u}) {
        auto br = make_gc_branch<double>(g, 8, 8);
        br.weight = oracle::randn<double>({g, 8 / g, 8 / g}, g);
        const auto W = scatter_columns(compact(br, 8, 8), reorder_permutation(g, 8));
        const auto x = oracle::randn<double>({5, 8}, 11);
        const auto want = gc_forward(br, channel_reorder(g, x));
        EXPECT_LE(max_abs_diff(linear(W, x), want), 1e-14);
    }
}
