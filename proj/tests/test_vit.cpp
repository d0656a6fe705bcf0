#include <gtest/gtest.h>

#include <cmath>

#include "consolidator/errors.hpp"
#include "consolidator/verify.hpp"
#include "consolidator/vit.hpp"
#include "oracles.hpp"

using namespace consolidator;

namespace {

template <typename T>
ViTModel<T> randomized(const ViTConfig& cfg, std::uint64_t seed) {
    auto m = attach_consolidators<T>(backbone_checkpoint(init_backbone<T>(cfg, seed)), cfg);
    std::uint64_t s = seed * 1000;
    for (auto* l : m.layers()) oracle::randomize(*l, ++s, 0.05);
    return m;
}

}  // namespace

TEST(Config, Validation) {
    EXPECT_NO_THROW(ViTConfig::mini().validate());
    EXPECT_NO_THROW(ViTConfig::vit_b16().validate());
    auto c = ViTConfig::mini();
    c.patch_size = 5;
    EXPECT_THROW(c.validate(), DimensionError);
    c = ViTConfig::mini();
    c.heads = 3;
    EXPECT_THROW(c.validate(), DimensionError);
    c = ViTConfig::mini();
    c.groups = {48};
    EXPECT_THROW(c.validate(), GroupDivisibilityError);
    EXPECT_EQ(ViTConfig::mini().num_patches(), 4u);
    EXPECT_EQ(ViTConfig::vit_b16().num_patches(), 196u);
}

TEST(PatchEmbed, Shape) {
    const auto m = init_backbone<float>(ViTConfig::mini(), 1);
    Rng rng(1);
    const auto tokens = patch_embed(m, random_images<float>(m.config, 2, rng));
    EXPECT_EQ(tokens.shape(), (Shape{2, 5, 64}));
    EXPECT_THROW(patch_embed(m, Tensor<float>({2, 3, 12, 12})), DimensionError);
}

TEST(PatchEmbed, IdentityProjectionFlattensPatches) {
    ViTConfig c;
    c.image_size = 4;
    c.patch_size = 2;
    c.channels = 3;
    c.dim = 12;
    c.heads = 2;
    c.groups = {};
    auto m = init_backbone<double>(c, 2);
    m.patch_weight.fill(0.0);
    for (std::size_t i = 0; i < 12; ++i) m.patch_weight[i * 12 + i] = 1.0;
    m.patch_bias.fill(0.0);
    m.pos_embed.fill(0.0);
    m.cls_token.fill(0.0);
    Tensor<double> img({1, 3, 4, 4});
    for (std::size_t i = 0; i < img.numel(); ++i) img[i] = double(i);
    const auto t = patch_embed(m, img);
    for (std::size_t d = 0; d < 12; ++d) EXPECT_EQ(t[d], 0.0);
    for (std::size_t pr = 0; pr < 2; ++pr)
        for (std::size_t pc = 0; pc < 2; ++pc)
            for (std::size_t i = 0; i < 2; ++i)
                for (std::size_t j = 0; j < 2; ++j)
                    for (std::size_t ch = 0; ch < 3; ++ch) {
                        const std::size_t token = 1 + pr * 2 + pc;
                        const std::size_t feat = (i * 2 + j) * 3 + ch;
                        const std::size_t y = pr * 2 + i, x = pc * 2 + j;
                        EXPECT_EQ(t[token * 12 + feat], img[(ch * 4 + y) * 4 + x]);
                    }
}

TEST(Mhsa, MatchesPerHeadOracle) {
    ViTConfig c = ViTConfig::mini();
    c.dim = 8;
    c.heads = 2;
    c.groups = {2, 4};
    const auto m = randomized<double>(c, 3);
    const auto& attn = m.blocks[0].attn;
    const auto x = oracle::randn<double>({1, 3, 8}, 4);
    const auto y = mhsa_forward(attn, x, 2);
    std::vector<std::vector<long double>> q, k, v;
    for (std::size_t t = 0; t < 3; ++t) {
        const auto row = oracle::to_ld(x.row(t));
        q.push_back(oracle::layer_forward(attn.q, row));
        k.push_back(oracle::layer_forward(attn.k, row));
        v.push_back(oracle::layer_forward(attn.v, row));
    }
    for (std::size_t t = 0; t < 3; ++t) {
        std::vector<long double> ctx(8, 0.0L);
        for (std::size_t h = 0; h < 2; ++h) {
            std::vector<long double> s(3);
            long double z = 0;
            for (std::size_t u = 0; u < 3; ++u) {
                long double dot = 0;
                for (std::size_t d = 0; d < 4; ++d) dot += q[t][h * 4 + d] * k[u][h * 4 + d];
                s[u] = std::exp(dot / std::sqrt(4.0L));
                z += s[u];
            }
            for (std::size_t u = 0; u < 3; ++u)
                for (std::size_t d = 0; d < 4; ++d) ctx[h * 4 + d] += s[u] / z * v[u][h * 4 + d];
        }
        const auto out = oracle::layer_forward(attn.proj, ctx);
        for (std::size_t e = 0; e < 8; ++e) EXPECT_NEAR(y.row(t)[e], double(out[e]), 1e-12);
    }
}

TEST(Mhsa, SingleTokenIsProjectedValue) {
    const auto m = randomized<double>(ViTConfig::mini(), 5);
    const auto& attn = m.blocks[0].attn;
    const auto x = oracle::randn<double>({2, 1, 64}, 6);
    const auto want = forward_eval(attn.proj, forward_eval(attn.v, x));
    EXPECT_LE(max_abs_diff(mhsa_forward(attn, x, 4), want), 1e-12);
}

TEST(Mhsa, AttentionRowsSumToOne) {
    const auto m = randomized<double>(ViTConfig::mini(), 7);
    AttentionCache<double> cache;
    mhsa_forward(m.blocks[0].attn, oracle::randn<double>({2, 5, 64}, 8), 4, {}, &cache);
    for (std::size_t r = 0; r < cache.probs.rows(); ++r) {
        double s = 0;
        for (auto p : cache.probs.row(r)) s += p;
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Mlp, ZeroWeightsGiveBiasPath) {
    auto m = attach_consolidators<double>(backbone_checkpoint(init_backbone<double>(ViTConfig::mini(), 9)),
                                          ViTConfig::mini());
    auto& mlp = m.blocks[0].mlp;
    mlp.fc1.base_weight.fill(0.0);
    mlp.fc2.base_weight.fill(0.0);
    const auto y = mlp_forward(mlp, oracle::randn<double>({1, 3, 64}, 10));
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t e = 0; e < 64; ++e) {
            double want = mlp.fc2.base_bias[e];
            // fc2 weight is zero, so the hidden activations never reach the output
            EXPECT_DOUBLE_EQ(y.row(t)[e], want);
        }
    mlp.fc1.base_bias.fill(0.0);
    mlp.fc2.base_bias.fill(0.0);
    mlp.fc1.base_weight = oracle::randn<double>({256, 64}, 11);
    mlp.fc2.base_weight = oracle::randn<double>({64, 256}, 12);
    const auto z = mlp_forward(mlp, Tensor<double>({1, 2, 64}));
    EXPECT_EQ(max_abs(z), 0.0);
}

TEST(Vit, LogitsShapeAndZeroInitTransparency) {
    const auto cfg = ViTConfig::mini();
    const auto backbone = init_backbone<double>(cfg, 11);
    const auto model = attach_consolidators<double>(backbone_checkpoint(backbone), cfg);
    Rng rng(12);
    const auto images = random_images<double>(cfg, 2, rng);
    const auto logits = vit_forward(model, images);
    EXPECT_EQ(logits.shape(), (Shape{2, 10}));
    EXPECT_EQ(logits, vit_forward(backbone, images));
}

TEST(Vit, AttachCountsAndPartition) {
    const auto cfg = ViTConfig::mini();
    const auto model = attach_consolidators<float>(backbone_checkpoint(init_backbone<float>(cfg, 1)), cfg);
    EXPECT_EQ(model.layers().size(), 12u);
    const auto p = trainable_partition(model);
    EXPECT_EQ(p.frozen.size(), 12u + 4u);
    for (const auto& n : p.frozen) {
        const bool fc = n.ends_with(".weight") && n.starts_with("blocks.") && n.find("norm") == std::string::npos;
        const bool emb = n == "patch_embed.weight" || n == "patch_embed.bias" || n == "cls_token" || n == "pos_embed";
        EXPECT_TRUE(fc || emb) << n;
    }
    auto has = [&](const std::string& n) {
        return std::find(p.trainable.begin(), p.trainable.end(), n) != p.trainable.end();
    };
    EXPECT_TRUE(has("head.weight"));
    EXPECT_TRUE(has("norm.bias"));
    EXPECT_TRUE(has("blocks.1.norm2.weight"));
    EXPECT_TRUE(has("blocks.0.attn.q.bias"));
    EXPECT_TRUE(has("blocks.0.mlp.fc1.branch.1.weight"));
}

TEST(Vit, DepthZeroAndInventoryErrors) {
    auto cfg = ViTConfig::mini();
    cfg.depth = 0;
    const auto m = attach_consolidators<float>(backbone_checkpoint(init_backbone<float>(cfg, 1)), cfg);
    EXPECT_TRUE(m.layers().empty());
    Rng rng(1);
    EXPECT_EQ(vit_forward(m, random_images<float>(cfg, 3, rng)).shape(), (Shape{3, 10}));

    const auto mini = ViTConfig::mini();
    auto bad_groups = mini;
    bad_groups.groups = {3};
    const auto backbone = backbone_checkpoint(init_backbone<float>(mini, 1));
    EXPECT_THROW(attach_consolidators<float>(backbone, bad_groups), GroupDivisibilityError);

    Checkpoint partial;
    for (const auto& e : backbone.entries())
        if (e.name != "blocks.1.mlp.fc2.weight") partial.add_entry(e);
    try {
        attach_consolidators<float>(partial, mini);
        FAIL();
    } catch (const StructuralError& e) {
        EXPECT_NE(std::string(e.what()).find("blocks.1.mlp.fc2.weight"), std::string::npos);
    }
}

TEST(Vit, CheckpointRoundTripKeepsBranches) {
    auto cfg = ViTConfig::mini();
    cfg.droppath_p = 0.2;
    auto m = randomized<float>(cfg, 13);
    const auto back = model_from_checkpoint<float>(model_checkpoint(m));
    EXPECT_EQ(model_checkpoint(back), model_checkpoint(m));
    EXPECT_EQ(back.layers()[3]->droppath_p, 0.2);
    Rng rng(1);
    const auto images = random_images<float>(cfg, 2, rng);
    EXPECT_EQ(vit_forward(back, images), vit_forward(m, images));
}

TEST(Vit, MergedCheckpointMatchesUnmerged) {
    for (bool f64 : {false, true}) {
        const auto cfg = ViTConfig::mini();
        if (f64) {
            const auto backbone = backbone_checkpoint(init_backbone<double>(cfg, 14));
            auto m = randomized<double>(cfg, 14);
            const auto merged = apply_delta(backbone, make_task_delta(m));
            EXPECT_TRUE(verify_equivalence(m, merged, 20, 1e-10).pass);
        } else {
            const auto backbone = backbone_checkpoint(init_backbone<float>(cfg, 14));
            auto m = randomized<float>(cfg, 14);
            const auto merged = apply_delta(backbone, make_task_delta(m));
            EXPECT_TRUE(verify_equivalence(m, merged, 20, 1e-4).pass);
        }
    }
}

TEST(Vit, BackwardMatchesDifferences) {
    auto cfg = ViTConfig::mini();
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.groups = {2, 4};
    auto m = randomized<double>(cfg, 15);
    Rng rng(16);
    const auto images = random_images<double>(cfg, 2, rng);
    const DropMasks masks = draw_drop_masks(m, 2, rng);
    const auto dlogits = oracle::randn<double>({2, 10}, 17);
    auto loss = [&]() {
        const auto y = vit_forward(m, images, &masks, nullptr);
        double s = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * dlogits[i];
        return s;
    };
    ForwardCache<double> cache;
    vit_forward(m, images, &masks, &cache);
    auto grad = zeros_like(m);
    vit_backward(m, cache, dlogits, grad);
    std::vector<std::pair<Tensor<double>*, Tensor<double>*>> pairs;
    std::vector<bool> trainable;
    for_each_parameter(m, [&](const std::string&, Tensor<double>& t, ParamKind, bool tr) {
        pairs.push_back({&t, nullptr});
        trainable.push_back(tr);
    });
    std::size_t i = 0;
    for_each_parameter(grad, [&](const std::string&, Tensor<double>& t, ParamKind, bool) { pairs[i++].second = &t; });
    for (std::size_t j = pairs.size(); j-- > 0;)
        if (!trainable[j]) pairs.erase(pairs.begin() + static_cast<std::ptrdiff_t>(j));
    const double h = 1e-6;
    for (auto [value, g] : pairs) {
        for (std::size_t k = 0; k < value->numel(); k += 1 + value->numel() / 5) {
            const double saved = (*value)[k];
            (*value)[k] = saved + h;
            const double up = loss();
            (*value)[k] = saved - h;
            const double down = loss();
            (*value)[k] = saved;
            const double fd = (up - down) / (2 * h);
            EXPECT_NEAR((*g)[k], fd, 1e-6 * std::max(1.0, std::abs(fd)));
        }
    }
}
