#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "consolidator/checkpoint.hpp"
#include "consolidator/consolidate.hpp"
#include "consolidator/layer.hpp"
#include "consolidator/tensor.hpp"

namespace consolidator {

struct ViTConfig {
    std::size_t image_size = 16;
    std::size_t patch_size = 8;
    std::size_t channels = 3;
    std::size_t dim = 64;
    std::size_t depth = 2;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t classes = 10;
    double droppath_p = 0.0;
    /// Branch groups attached to every consolidated FC layer.
    std::vector<std::size_t> groups{8, 16};
    LayerOptions layer_options;

    std::size_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
    std::size_t tokens() const { return num_patches() + 1; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t hidden() const { return mlp_ratio * dim; }

    /// Throws DimensionError / GroupDivisibilityError on inconsistent settings.
    void validate() const;
    bool same_architecture(const ViTConfig& other) const;

    static ViTConfig mini();
    /// ViT-B/16 dimensions, for budget arithmetic only.
    static ViTConfig vit_b16();
};

template <typename T>
struct Norm {
    Tensor<T> gamma;
    Tensor<T> beta;
};

template <typename T>
struct Attention {
    ConsolidatorLayer<T> q, k, v, proj;
};

template <typename T>
struct Mlp {
    ConsolidatorLayer<T> fc1, fc2;
};

template <typename T>
struct Block {
    Norm<T> norm1;
    Attention<T> attn;
    Norm<T> norm2;
    Mlp<T> mlp;

    /// q, k, v, proj, fc1, fc2.
    std::array<const ConsolidatorLayer<T>*, 6> layers() const {
        return {&attn.q, &attn.k, &attn.v, &attn.proj, &mlp.fc1, &mlp.fc2};
    }
    std::array<ConsolidatorLayer<T>*, 6> layers() {
        return {&attn.q, &attn.k, &attn.v, &attn.proj, &mlp.fc1, &mlp.fc2};
    }
};

template <typename T>
struct ViTModel {
    ViTConfig config;
    Tensor<T> patch_weight;  ///< D x patch_dim
    Tensor<T> patch_bias;    ///< D
    Tensor<T> cls_token;     ///< D
    Tensor<T> pos_embed;     ///< tokens x D
    std::vector<Block<T>> blocks;
    Norm<T> norm;
    Tensor<T> head_weight;  ///< classes x D
    Tensor<T> head_bias;    ///< classes

    std::vector<const ConsolidatorLayer<T>*> layers() const;
    std::vector<ConsolidatorLayer<T>*> layers();
};

enum class ParamKind {
    FrozenWeight,  ///< consolidated FC base weight
    Embedding,     ///< patch projection, its bias, class token, positions
    BaseBias,
    BranchWeight,
    BranchBias,
    LayerNorm,
    Head,
};

const char* param_kind_name(ParamKind kind);

/// Calls f(name, tensor, kind, trainable) for every parameter tensor in a
/// fixed order. Branch tensors are named "<layer>.branch.<i>.weight|bias",
/// unstructured ones "<layer>.unstructured.<i>.weight".
template <typename T>
void for_each_parameter(const ViTModel<T>& model,
                        const std::type_identity_t<std::function<void(const std::string&, const Tensor<T>&, ParamKind, bool)>>& f);
template <typename T>
void for_each_parameter(ViTModel<T>& model,
                        const std::type_identity_t<std::function<void(const std::string&, Tensor<T>&, ParamKind, bool)>>& f);

struct Partition {
    std::vector<std::string> trainable;
    std::vector<std::string> frozen;
};

template <typename T>
Partition trainable_partition(const ViTModel<T>& model);

template <typename T>
ViTModel<T> zeros_like(const ViTModel<T>& model);

/// Random stand-in for a pretrained backbone (no branches attached).
template <typename T>
ViTModel<T> init_backbone(const ViTConfig& config, std::uint64_t seed);

/// Backbone tensors only, in canonical order, plus the "meta.config" record.
template <typename T>
Checkpoint backbone_checkpoint(const ViTModel<T>& model);

/// Backbone tensors plus every branch tensor and per-layer branch metadata.
template <typename T>
Checkpoint model_checkpoint(const ViTModel<T>& model);

/// Rebuilds a model from backbone_checkpoint or model_checkpoint output.
template <typename T>
ViTModel<T> model_from_checkpoint(const Checkpoint& ckpt);

ViTConfig config_from_checkpoint(const Checkpoint& ckpt);

/// Wraps all 6 * depth FC layers of a backbone with zero-initialized
/// consolidators built from config.groups.
template <typename T>
ViTModel<T> attach_consolidators(const Checkpoint& backbone, const ViTConfig& config);

/// Training-storage consolidation of the whole model.
template <typename T>
TaskDelta make_task_delta(const ViTModel<T>& model);

/// Per-block droppath scales: [block][layer 0..5][sample].
using DropMasks = std::vector<std::array<std::vector<double>, 6>>;

template <typename T>
DropMasks draw_drop_masks(const ViTModel<T>& model, std::size_t batch, Rng& rng);

template <typename T>
struct AttentionCache {
    Tensor<T> input, q, k, v;
    Tensor<T> probs;  ///< B x heads x T x T
    Tensor<T> context;
};

template <typename T>
struct MlpCache {
    Tensor<T> input, pre_act, act;
};

template <typename T>
struct BlockCache {
    Tensor<T> input;  ///< block input
    Tensor<T> mid;    ///< after the attention residual
    AttentionCache<T> attn;
    MlpCache<T> mlp;
};

template <typename T>
struct ForwardCache {
    std::vector<BlockCache<T>> blocks;
    Tensor<T> cls;       ///< B x D, class tokens before the final norm
    Tensor<T> cls_norm;  ///< after the final norm
    DropMasks masks;
};

/// images B x C x H x W -> tokens B x (N+1) x D.
template <typename T>
Tensor<T> patch_embed(const ViTModel<T>& model, const Tensor<T>& images);

/// scales: empty (eval) or one entry per layer q, k, v, proj.
template <typename T>
Tensor<T> mhsa_forward(const Attention<T>& attn, const Tensor<T>& x, std::size_t heads,
                       std::span<const std::vector<double>> scales = {}, AttentionCache<T>* cache = nullptr);

template <typename T>
Tensor<T> mhsa_backward(const Attention<T>& attn, const AttentionCache<T>& cache, std::size_t heads,
                        std::span<const std::vector<double>> scales, const Tensor<T>& dy, Attention<T>& grad);

/// scales: empty (eval) or one entry per layer fc1, fc2.
template <typename T>
Tensor<T> mlp_forward(const Mlp<T>& mlp, const Tensor<T>& x, std::span<const std::vector<double>> scales = {},
                      MlpCache<T>* cache = nullptr);

template <typename T>
Tensor<T> mlp_backward(const Mlp<T>& mlp, const MlpCache<T>& cache, std::span<const std::vector<double>> scales,
                       const Tensor<T>& dy, Mlp<T>& grad);

/// Eval forward: logits B x classes.
template <typename T>
Tensor<T> vit_forward(const ViTModel<T>& model, const Tensor<T>& images);

/// Train forward with freshly drawn droppath masks.
template <typename T>
Tensor<T> vit_forward_train(const ViTModel<T>& model, const Tensor<T>& images, Rng& rng);

/// General forward. `masks` null means eval; `cache` receives what
/// vit_backward needs (including the masks used).
template <typename T>
Tensor<T> vit_forward(const ViTModel<T>& model, const Tensor<T>& images, const DropMasks* masks,
                      std::type_identity_t<ForwardCache<T>>* cache);

/// Accumulates parameter gradients into `grad` (a zeros_like model). Frozen
/// tensors in `grad` are left untouched.
template <typename T>
void vit_backward(const ViTModel<T>& model, const ForwardCache<T>& cache, const Tensor<T>& dlogits,
                  ViTModel<T>& grad);

template <typename Dst, typename Src>
ConsolidatorLayer<Dst> layer_cast(const ConsolidatorLayer<Src>& l) {
    ConsolidatorLayer<Dst> out;
    out.name = l.name;
    out.base_weight = tensor_cast<Dst>(l.base_weight);
    out.base_bias = tensor_cast<Dst>(l.base_bias);
    for (const auto& b : l.branches) {
        out.branches.push_back(
            {b.groups, b.shuffle_groups, tensor_cast<Dst>(b.weight), tensor_cast<Dst>(b.bias), b.has_bias});
    }
    for (const auto& u : l.unstructured) out.unstructured.push_back({tensor_cast<Dst>(u.weight), u.support});
    out.droppath_p = l.droppath_p;
    out.tune_base_bias = l.tune_base_bias;
    return out;
}

/// Element-wise precision change of every tensor; structure is kept.
template <typename Dst, typename Src>
ViTModel<Dst> model_cast(const ViTModel<Src>& m) {
    auto norm = [](const Norm<Src>& n) { return Norm<Dst>{tensor_cast<Dst>(n.gamma), tensor_cast<Dst>(n.beta)}; };
    ViTModel<Dst> out;
    out.config = m.config;
    out.patch_weight = tensor_cast<Dst>(m.patch_weight);
    out.patch_bias = tensor_cast<Dst>(m.patch_bias);
    out.cls_token = tensor_cast<Dst>(m.cls_token);
    out.pos_embed = tensor_cast<Dst>(m.pos_embed);
    for (const auto& b : m.blocks) {
        Block<Dst> nb;
        nb.norm1 = norm(b.norm1);
        nb.norm2 = norm(b.norm2);
        nb.attn = {layer_cast<Dst>(b.attn.q), layer_cast<Dst>(b.attn.k), layer_cast<Dst>(b.attn.v),
                   layer_cast<Dst>(b.attn.proj)};
        nb.mlp = {layer_cast<Dst>(b.mlp.fc1), layer_cast<Dst>(b.mlp.fc2)};
        out.blocks.push_back(std::move(nb));
    }
    out.norm = norm(m.norm);
    out.head_weight = tensor_cast<Dst>(m.head_weight);
    out.head_bias = tensor_cast<Dst>(m.head_bias);
    return out;
}

}  // namespace consolidator
