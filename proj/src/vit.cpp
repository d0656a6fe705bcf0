#include "consolidator/vit.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace consolidator {

// ---------------------------------------------------------------------------
// configuration

void ViTConfig::validate() const {
    if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0) {
        throw DimensionError("patch size " + std::to_string(patch_size) + " does not divide image size " +
                             std::to_string(image_size));
    }
    if (channels == 0 || dim == 0 || classes == 0 || mlp_ratio == 0) {
        throw DimensionError("channels, dim, classes and mlp_ratio must be positive");
    }
    if (heads == 0 || dim % heads != 0) {
        throw DimensionError("head count " + std::to_string(heads) + " does not divide dim " + std::to_string(dim));
    }
    if (!(droppath_p >= 0.0 && droppath_p <= 1.0)) throw std::invalid_argument("droppath must lie in [0, 1]");
    for (auto g : groups) {
        check_groups(g, dim, dim);
        check_groups(g, dim, hidden());
    }
}

bool ViTConfig::same_architecture(const ViTConfig& o) const {
    return image_size == o.image_size && patch_size == o.patch_size && channels == o.channels && dim == o.dim &&
           depth == o.depth && heads == o.heads && mlp_ratio == o.mlp_ratio && classes == o.classes;
}

ViTConfig ViTConfig::mini() {
    return ViTConfig{};
}

ViTConfig ViTConfig::vit_b16() {
    ViTConfig c;
    c.image_size = 224;
    c.patch_size = 16;
    c.channels = 3;
    c.dim = 768;
    c.depth = 12;
    c.heads = 12;
    c.mlp_ratio = 4;
    c.classes = 1000;
    c.groups = {384};
    return c;
}

const char* param_kind_name(ParamKind kind) {
    switch (kind) {
        case ParamKind::FrozenWeight: return "frozen_weight";
        case ParamKind::Embedding: return "embedding";
        case ParamKind::BaseBias: return "base_bias";
        case ParamKind::BranchWeight: return "branch_weight";
        case ParamKind::BranchBias: return "branch_bias";
        case ParamKind::LayerNorm: return "layernorm";
        case ParamKind::Head: return "head";
    }
    return "unknown";
}

// ---------------------------------------------------------------------------
// parameter traversal

template <typename T>
std::vector<const ConsolidatorLayer<T>*> ViTModel<T>::layers() const {
    std::vector<const ConsolidatorLayer<T>*> out;
    for (const auto& b : blocks) {
        for (auto* l : b.layers()) out.push_back(l);
    }
    return out;
}

template <typename T>
std::vector<ConsolidatorLayer<T>*> ViTModel<T>::layers() {
    std::vector<ConsolidatorLayer<T>*> out;
    for (auto& b : blocks) {
        for (auto* l : b.layers()) out.push_back(l);
    }
    return out;
}

namespace {

std::string block_prefix(std::size_t l) {
    return "blocks." + std::to_string(l) + ".";
}

constexpr std::array<const char*, 6> kLayerSuffix = {"attn.q", "attn.k", "attn.v", "attn.proj", "mlp.fc1", "mlp.fc2"};

template <typename Layer, typename F>
void visit_layer(Layer& layer, F&& f) {
    const std::string& n = layer.name;
    f(n + ".weight", layer.base_weight, ParamKind::FrozenWeight, false);
    f(n + ".bias", layer.base_bias, ParamKind::BaseBias, layer.tune_base_bias);
    for (std::size_t i = 0; i < layer.branches.size(); ++i) {
        auto& b = layer.branches[i];
        const std::string p = n + ".branch." + std::to_string(i);
        f(p + ".weight", b.weight, ParamKind::BranchWeight, true);
        f(p + ".bias", b.bias, ParamKind::BranchBias, b.has_bias);
    }
    for (std::size_t i = 0; i < layer.unstructured.size(); ++i) {
        f(n + ".unstructured." + std::to_string(i) + ".weight", layer.unstructured[i].weight,
          ParamKind::BranchWeight, true);
    }
}

template <typename Model, typename F>
void visit_model(Model& m, F&& f) {
    f("patch_embed.weight", m.patch_weight, ParamKind::Embedding, false);
    f("patch_embed.bias", m.patch_bias, ParamKind::Embedding, false);
    f("cls_token", m.cls_token, ParamKind::Embedding, false);
    f("pos_embed", m.pos_embed, ParamKind::Embedding, false);
    for (std::size_t l = 0; l < m.blocks.size(); ++l) {
        auto& b = m.blocks[l];
        const std::string p = block_prefix(l);
        f(p + "norm1.weight", b.norm1.gamma, ParamKind::LayerNorm, true);
        f(p + "norm1.bias", b.norm1.beta, ParamKind::LayerNorm, true);
        visit_layer(b.attn.q, f);
        visit_layer(b.attn.k, f);
        visit_layer(b.attn.v, f);
        visit_layer(b.attn.proj, f);
        f(p + "norm2.weight", b.norm2.gamma, ParamKind::LayerNorm, true);
        f(p + "norm2.bias", b.norm2.beta, ParamKind::LayerNorm, true);
        visit_layer(b.mlp.fc1, f);
        visit_layer(b.mlp.fc2, f);
    }
    f("norm.weight", m.norm.gamma, ParamKind::LayerNorm, true);
    f("norm.bias", m.norm.beta, ParamKind::LayerNorm, true);
    f("head.weight", m.head_weight, ParamKind::Head, true);
    f("head.bias", m.head_bias, ParamKind::Head, true);
}

bool is_branch_kind(ParamKind k) {
    return k == ParamKind::BranchWeight || k == ParamKind::BranchBias;
}

}  // namespace

template <typename T>
void for_each_parameter(const ViTModel<T>& model,
                        const std::type_identity_t<std::function<void(const std::string&, const Tensor<T>&, ParamKind, bool)>>& f) {
    visit_model(model, f);
}

template <typename T>
void for_each_parameter(ViTModel<T>& model,
                        const std::type_identity_t<std::function<void(const std::string&, Tensor<T>&, ParamKind, bool)>>& f) {
    visit_model(model, f);
}

template <typename T>
Partition trainable_partition(const ViTModel<T>& model) {
    Partition p;
    visit_model(model, [&](const std::string& name, const Tensor<T>&, ParamKind, bool trainable) {
        (trainable ? p.trainable : p.frozen).push_back(name);
    });
    return p;
}

template <typename T>
ViTModel<T> zeros_like(const ViTModel<T>& model) {
    ViTModel<T> z = model;
    visit_model(z, [](const std::string&, Tensor<T>& t, ParamKind, bool) { t.fill(T(0)); });
    return z;
}

// ---------------------------------------------------------------------------
// construction and checkpoints

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double mean, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(mean, stddev);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
}

std::array<std::pair<std::size_t, std::size_t>, 6> layer_shapes(const ViTConfig& c) {
    // (out, in) per q, k, v, proj, fc1, fc2
    return {{{c.dim, c.dim}, {c.dim, c.dim}, {c.dim, c.dim}, {c.dim, c.dim}, {c.hidden(), c.dim}, {c.dim, c.hidden()}}};
}

Tensor<double> config_record(const ViTConfig& c) {
    return Tensor<double>({8}, {double(c.image_size), double(c.patch_size), double(c.channels), double(c.dim),
                                double(c.depth), double(c.heads), double(c.mlp_ratio), double(c.classes)});
}

}  // namespace

ViTConfig config_from_checkpoint(const Checkpoint& ckpt) {
    const auto* e = ckpt.find("meta.config");
    if (!e) throw StructuralError("checkpoint has no 'meta.config' record");
    const auto rec = e->as<double>();
    if (rec.numel() != 8) throw StructuralError("'meta.config' must hold 8 values");
    auto at = [&](std::size_t i) {
        const double v = rec[i];
        if (!(v >= 0.0) || v != std::floor(v) || v > 1e9) throw StructuralError("'meta.config' holds invalid values");
        return static_cast<std::size_t>(v);
    };
    ViTConfig c;
    c.image_size = at(0);
    c.patch_size = at(1);
    c.channels = at(2);
    c.dim = at(3);
    c.depth = at(4);
    c.heads = at(5);
    c.mlp_ratio = at(6);
    c.classes = at(7);
    c.groups.clear();
    c.validate();
    return c;
}

template <typename T>
ViTModel<T> init_backbone(const ViTConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const std::size_t D = config.dim;
    ViTModel<T> m;
    m.config = config;
    m.patch_weight = normal_tensor<T>({D, config.patch_dim()}, 0.0, 1.0 / std::sqrt(double(config.patch_dim())), rng);
    m.patch_bias = normal_tensor<T>({D}, 0.0, 0.02, rng);
    m.cls_token = normal_tensor<T>({D}, 0.0, 0.02, rng);
    m.pos_embed = normal_tensor<T>({config.tokens(), D}, 0.0, 0.02, rng);
    const auto shapes = layer_shapes(config);
    for (std::size_t l = 0; l < config.depth; ++l) {
        Block<T> b;
        b.norm1 = {normal_tensor<T>({D}, 1.0, 0.05, rng), normal_tensor<T>({D}, 0.0, 0.05, rng)};
        b.norm2 = {normal_tensor<T>({D}, 1.0, 0.05, rng), normal_tensor<T>({D}, 0.0, 0.05, rng)};
        auto layers = b.layers();
        for (std::size_t i = 0; i < 6; ++i) {
            const auto [out, in] = shapes[i];
            auto w = normal_tensor<T>({out, in}, 0.0, 1.0 / std::sqrt(double(in)), rng);
            auto bias = normal_tensor<T>({out}, 0.0, 0.02, rng);
            *layers[i] = init_layer(block_prefix(l) + kLayerSuffix[i], std::move(w), std::move(bias), {},
                                    config.droppath_p, config.layer_options);
        }
        m.blocks.push_back(std::move(b));
    }
    m.norm = {normal_tensor<T>({D}, 1.0, 0.05, rng), normal_tensor<T>({D}, 0.0, 0.05, rng)};
    m.head_weight = normal_tensor<T>({config.classes, D}, 0.0, 1.0 / std::sqrt(double(D)), rng);
    m.head_bias = Tensor<T>({config.classes});
    m.config.groups.clear();
    return m;
}

template <typename T>
Checkpoint backbone_checkpoint(const ViTModel<T>& model) {
    Checkpoint ckpt;
    visit_model(model, [&](const std::string& name, const Tensor<T>& t, ParamKind kind, bool) {
        if (!is_branch_kind(kind)) ckpt.add(name, t);
    });
    ckpt.add("meta.config", config_record(model.config));
    return ckpt;
}

template <typename T>
Checkpoint model_checkpoint(const ViTModel<T>& model) {
    Checkpoint ckpt;
    visit_model(model, [&](const std::string& name, const Tensor<T>& t, ParamKind, bool) { ckpt.add(name, t); });
    ckpt.add("meta.config", config_record(model.config));
    for (const auto* layer : model.layers()) {
        // [p, tune_base_bias, #branches, #unstructured, (g, shuffle_g, has_bias)...]
        std::vector<double> rec = {layer->droppath_p, layer->tune_base_bias ? 1.0 : 0.0,
                                   double(layer->branches.size()), double(layer->unstructured.size())};
        for (const auto& b : layer->branches) {
            rec.push_back(double(b.groups));
            rec.push_back(double(b.shuffle_groups));
            rec.push_back(b.has_bias ? 1.0 : 0.0);
        }
        const std::size_t n = rec.size();
        ckpt.add(layer->name + ".consolidator", Tensor<double>({n}, std::move(rec)));
        for (std::size_t i = 0; i < layer->unstructured.size(); ++i) {
            const auto& s = layer->unstructured[i].support;
            std::vector<double> idx(s.begin(), s.end());
            ckpt.add(layer->name + ".unstructured." + std::to_string(i) + ".support",
                     Tensor<double>({idx.size()}, std::move(idx)));
        }
    }
    return ckpt;
}

namespace {

template <typename T>
class TensorReader {
public:
    explicit TensorReader(const Checkpoint& ckpt) : ckpt_(ckpt) {}

    Tensor<T> read(const std::string& name, const Shape& shape) {
        const auto* e = ckpt_.find(name);
        if (!e) {
            missing_.push_back(name);
            return Tensor<T>(shape);
        }
        if (e->shape() != shape) {
            throw StructuralError("tensor '" + name + "' has shape " + shape_to_string(e->shape()) + ", expected " +
                                  shape_to_string(shape));
        }
        return e->as<T>();
    }

    void finish() const {
        if (missing_.empty()) return;
        std::string msg = "checkpoint is missing " + std::to_string(missing_.size()) + " tensor(s):";
        for (const auto& n : missing_) msg += " " + n;
        throw StructuralError(msg);
    }

private:
    const Checkpoint& ckpt_;
    std::vector<std::string> missing_;
};

template <typename T>
ViTModel<T> read_backbone(const Checkpoint& ckpt, const ViTConfig& config) {
    config.validate();
    TensorReader<T> r(ckpt);
    const std::size_t D = config.dim;
    ViTModel<T> m;
    m.config = config;
    m.patch_weight = r.read("patch_embed.weight", {D, config.patch_dim()});
    m.patch_bias = r.read("patch_embed.bias", {D});
    m.cls_token = r.read("cls_token", {D});
    m.pos_embed = r.read("pos_embed", {config.tokens(), D});
    const auto shapes = layer_shapes(config);
    for (std::size_t l = 0; l < config.depth; ++l) {
        const std::string p = block_prefix(l);
        Block<T> b;
        b.norm1 = {r.read(p + "norm1.weight", {D}), r.read(p + "norm1.bias", {D})};
        b.norm2 = {r.read(p + "norm2.weight", {D}), r.read(p + "norm2.bias", {D})};
        auto layers = b.layers();
        for (std::size_t i = 0; i < 6; ++i) {
            const auto [out, in] = shapes[i];
            const std::string name = p + kLayerSuffix[i];
            layers[i]->name = name;
            layers[i]->base_weight = r.read(name + ".weight", {out, in});
            layers[i]->base_bias = r.read(name + ".bias", {out});
            layers[i]->droppath_p = config.droppath_p;
            layers[i]->tune_base_bias = config.layer_options.tune_base_bias;
        }
        m.blocks.push_back(std::move(b));
    }
    m.norm = {r.read("norm.weight", {D}), r.read("norm.bias", {D})};
    m.head_weight = r.read("head.weight", {config.classes, D});
    m.head_bias = r.read("head.bias", {config.classes});
    r.finish();
    return m;
}

}  // namespace

template <typename T>
ViTModel<T> model_from_checkpoint(const Checkpoint& ckpt) {
    ViTConfig config = config_from_checkpoint(ckpt);
    ViTModel<T> m = read_backbone<T>(ckpt, config);
    bool first = true;
    for (auto* layer : m.layers()) {
        const CheckpointEntry* meta = ckpt.find(layer->name + ".consolidator");
        if (!meta) continue;
        const auto rec = meta->as<double>();
        if (rec.numel() < 4) throw StructuralError("malformed '" + layer->name + ".consolidator' record");
        layer->droppath_p = rec[0];
        layer->tune_base_bias = rec[1] != 0.0;
        const auto nb = static_cast<std::size_t>(rec[2]);
        const auto nu = static_cast<std::size_t>(rec[3]);
        if (rec.numel() != 4 + 3 * nb) throw StructuralError("malformed '" + layer->name + ".consolidator' record");
        TensorReader<T> r(ckpt);
        for (std::size_t i = 0; i < nb; ++i) {
            const auto g = static_cast<std::size_t>(rec[4 + 3 * i]);
            const auto sg = static_cast<std::size_t>(rec[5 + 3 * i]);
            const bool has_bias = rec[6 + 3 * i] != 0.0;
            GCBranch<T> b = make_gc_branch<T>(g, layer->in_channels(), layer->out_channels(), sg != 1, has_bias);
            const std::string p = layer->name + ".branch." + std::to_string(i);
            b.weight = r.read(p + ".weight", b.weight.shape());
            b.bias = r.read(p + ".bias", b.bias.shape());
            layer->branches.push_back(std::move(b));
        }
        for (std::size_t i = 0; i < nu; ++i) {
            const std::string p = layer->name + ".unstructured." + std::to_string(i);
            UnstructuredBranch<T> u;
            u.weight = r.read(p + ".weight", {layer->out_channels(), layer->in_channels()});
            const auto* s = ckpt.find(p + ".support");
            if (!s) throw StructuralError("missing '" + p + ".support'");
            for (double v : s->as<double>().data()) u.support.push_back(static_cast<std::size_t>(v));
            layer->unstructured.push_back(std::move(u));
        }
        r.finish();
        if (first) {
            m.config.groups = layer->groups();
            m.config.droppath_p = layer->droppath_p;
            first = false;
        }
    }
    return m;
}

template <typename T>
ViTModel<T> attach_consolidators(const Checkpoint& backbone, const ViTConfig& config) {
    config.validate();
    if (backbone.contains("meta.config")) {
        const ViTConfig stored = config_from_checkpoint(backbone);
        if (!stored.same_architecture(config)) {
            throw StructuralError("backbone architecture does not match the requested configuration");
        }
    }
    ViTModel<T> m = read_backbone<T>(backbone, config);
    for (auto* layer : m.layers()) {
        *layer = init_layer(layer->name, std::move(layer->base_weight), std::move(layer->base_bias), config.groups,
                            config.droppath_p, config.layer_options);
    }
    return m;
}

template <typename T>
TaskDelta make_task_delta(const ViTModel<T>& model) {
    Checkpoint extras;
    visit_model(model, [&](const std::string& name, const Tensor<T>& t, ParamKind kind, bool) {
        if (kind == ParamKind::LayerNorm || kind == ParamKind::Head) extras.add(name, t);
    });
    TaskDelta delta = to_task_delta(model.layers(), std::move(extras), 0);
    delta.backbone_fingerprint = backbone_fingerprint(backbone_checkpoint(model), delta);
    return delta;
}

template <typename T>
DropMasks draw_drop_masks(const ViTModel<T>& model, std::size_t batch, Rng& rng) {
    DropMasks masks(model.blocks.size());
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        const auto layers = model.blocks[l].layers();
        for (std::size_t i = 0; i < 6; ++i) masks[l][i] = draw_droppath_scales(layers[i]->droppath_p, batch, rng);
    }
    return masks;
}

// ---------------------------------------------------------------------------
// forward / backward

template <typename T>
Tensor<T> patch_embed(const ViTModel<T>& model, const Tensor<T>& images) {
    const auto& c = model.config;
    if (images.rank() != 4 || images.extent(1) != c.channels || images.extent(2) != c.image_size ||
        images.extent(3) != c.image_size) {
        throw DimensionError("images must be B x " + std::to_string(c.channels) + " x " +
                             std::to_string(c.image_size) + " x " + std::to_string(c.image_size) + ", got " +
                             shape_to_string(images.shape()));
    }
    if (c.image_size % c.patch_size != 0) {
        throw DimensionError("patch size " + std::to_string(c.patch_size) + " does not divide image size " +
                             std::to_string(c.image_size));
    }
    const std::size_t B = images.extent(0), C = c.channels, H = c.image_size, P = c.patch_size;
    const std::size_t side = H / P, N = side * side, D = c.dim;
    Tensor<T> patches({B, N, c.patch_dim()});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t py = 0; py < side; ++py) {
            for (std::size_t px = 0; px < side; ++px) {
                auto row = patches.row(b * N + py * side + px);
                // flatten order (i, j, channel)
                for (std::size_t i = 0; i < P; ++i) {
                    for (std::size_t j = 0; j < P; ++j) {
                        for (std::size_t ch = 0; ch < C; ++ch) {
                            row[(i * P + j) * C + ch] = images[((b * C + ch) * H + py * P + i) * H + px * P + j];
                        }
                    }
                }
            }
        }
    }
    const Tensor<T> projected = affine(model.patch_weight, model.patch_bias, patches);
    Tensor<T> tokens({B, N + 1, D});
    for (std::size_t b = 0; b < B; ++b) {
        auto cls = tokens.row(b * (N + 1));
        for (std::size_t d = 0; d < D; ++d) cls[d] = model.cls_token[d] + model.pos_embed[d];
        for (std::size_t n = 0; n < N; ++n) {
            auto dst = tokens.row(b * (N + 1) + n + 1);
            auto src = projected.row(b * N + n);
            for (std::size_t d = 0; d < D; ++d) dst[d] = src[d] + model.pos_embed[(n + 1) * D + d];
        }
    }
    return tokens;
}

namespace {

std::span<const double> scale_at(std::span<const std::vector<double>> scales, std::size_t i) {
    return scales.empty() ? std::span<const double>{} : std::span<const double>(scales[i]);
}

}  // namespace

template <typename T>
Tensor<T> mhsa_forward(const Attention<T>& attn, const Tensor<T>& x, std::size_t heads,
                       std::span<const std::vector<double>> scales, AttentionCache<T>* cache) {
    if (x.rank() != 3) throw DimensionError("attention input must be B x T x D, got " + shape_to_string(x.shape()));
    const std::size_t B = x.extent(0), T_ = x.extent(1), D = x.extent(2);
    if (heads == 0 || D % heads != 0) {
        throw DimensionError("head count " + std::to_string(heads) + " does not divide " + std::to_string(D));
    }
    using A = acc_t<T>;
    const std::size_t hd = D / heads;
    const A inv_sqrt = A(1) / std::sqrt(static_cast<A>(hd));
    Tensor<T> q = forward(attn.q, x, scale_at(scales, 0));
    Tensor<T> k = forward(attn.k, x, scale_at(scales, 1));
    Tensor<T> v = forward(attn.v, x, scale_at(scales, 2));

    Tensor<T> logits({B, heads, T_, T_});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < T_; ++i) {
                const T* qi = q.data().data() + (b * T_ + i) * D + h * hd;
                for (std::size_t j = 0; j < T_; ++j) {
                    const T* kj = k.data().data() + (b * T_ + j) * D + h * hd;
                    A acc = 0;
                    for (std::size_t c = 0; c < hd; ++c) acc += static_cast<A>(qi[c]) * kj[c];
                    logits[((b * heads + h) * T_ + i) * T_ + j] = static_cast<T>(acc * inv_sqrt);
                }
            }
        }
    }
    Tensor<T> probs = softmax_rows(logits);
    Tensor<T> context({B, T_, D});
    std::vector<A> acc(hd);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < T_; ++i) {
                std::fill(acc.begin(), acc.end(), A(0));
                for (std::size_t j = 0; j < T_; ++j) {
                    const A p = probs[((b * heads + h) * T_ + i) * T_ + j];
                    const T* vj = v.data().data() + (b * T_ + j) * D + h * hd;
                    for (std::size_t c = 0; c < hd; ++c) acc[c] += p * vj[c];
                }
                T* out = context.data().data() + (b * T_ + i) * D + h * hd;
                for (std::size_t c = 0; c < hd; ++c) out[c] = static_cast<T>(acc[c]);
            }
        }
    }
    Tensor<T> out = forward(attn.proj, context, scale_at(scales, 3));
    if (cache) {
        cache->input = x;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->probs = std::move(probs);
        cache->context = std::move(context);
    }
    return out;
}

template <typename T>
Tensor<T> mhsa_backward(const Attention<T>& attn, const AttentionCache<T>& cache, std::size_t heads,
                        std::span<const std::vector<double>> scales, const Tensor<T>& dy, Attention<T>& grad) {
    const std::size_t B = cache.input.extent(0), T_ = cache.input.extent(1), D = cache.input.extent(2);
    const std::size_t hd = D / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    const Tensor<T> dctx = backward(attn.proj, cache.context, scale_at(scales, 3), dy, grad.proj);

    Tensor<T> dprobs(cache.probs.shape());
    Tensor<T> dv(cache.v.shape());
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < T_; ++i) {
                const T* gi = dctx.data().data() + (b * T_ + i) * D + h * hd;
                for (std::size_t j = 0; j < T_; ++j) {
                    const T* vj = cache.v.data().data() + (b * T_ + j) * D + h * hd;
                    T* dvj = dv.data().data() + (b * T_ + j) * D + h * hd;
                    const double p = cache.probs[((b * heads + h) * T_ + i) * T_ + j];
                    double acc = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) {
                        acc += static_cast<double>(gi[c]) * vj[c];
                        dvj[c] = static_cast<T>(dvj[c] + p * gi[c]);
                    }
                    dprobs[((b * heads + h) * T_ + i) * T_ + j] = static_cast<T>(acc);
                }
            }
        }
    }
    const Tensor<T> dlogits = softmax_rows_backward(cache.probs, dprobs);
    Tensor<T> dq(cache.q.shape());
    Tensor<T> dk(cache.k.shape());
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < T_; ++i) {
                const T* qi = cache.q.data().data() + (b * T_ + i) * D + h * hd;
                T* dqi = dq.data().data() + (b * T_ + i) * D + h * hd;
                for (std::size_t j = 0; j < T_; ++j) {
                    const double s = dlogits[((b * heads + h) * T_ + i) * T_ + j] * inv_sqrt;
                    if (s == 0.0) continue;
                    const T* kj = cache.k.data().data() + (b * T_ + j) * D + h * hd;
                    T* dkj = dk.data().data() + (b * T_ + j) * D + h * hd;
                    for (std::size_t c = 0; c < hd; ++c) {
                        dqi[c] = static_cast<T>(dqi[c] + s * kj[c]);
                        dkj[c] = static_cast<T>(dkj[c] + s * qi[c]);
                    }
                }
            }
        }
    }
    Tensor<T> dx = backward(attn.q, cache.input, scale_at(scales, 0), dq, grad.q);
    add_inplace(dx, backward(attn.k, cache.input, scale_at(scales, 1), dk, grad.k));
    add_inplace(dx, backward(attn.v, cache.input, scale_at(scales, 2), dv, grad.v));
    return dx;
}

template <typename T>
Tensor<T> mlp_forward(const Mlp<T>& mlp, const Tensor<T>& x, std::span<const std::vector<double>> scales,
                      MlpCache<T>* cache) {
    Tensor<T> pre = forward(mlp.fc1, x, scale_at(scales, 0));
    Tensor<T> act = gelu(pre);
    Tensor<T> out = forward(mlp.fc2, act, scale_at(scales, 1));
    if (cache) {
        cache->input = x;
        cache->pre_act = std::move(pre);
        cache->act = std::move(act);
    }
    return out;
}

template <typename T>
Tensor<T> mlp_backward(const Mlp<T>& mlp, const MlpCache<T>& cache, std::span<const std::vector<double>> scales,
                       const Tensor<T>& dy, Mlp<T>& grad) {
    const Tensor<T> dact = backward(mlp.fc2, cache.act, scale_at(scales, 1), dy, grad.fc2);
    const Tensor<T> dpre = gelu_backward(cache.pre_act, dact);
    return backward(mlp.fc1, cache.input, scale_at(scales, 0), dpre, grad.fc1);
}

template <typename T>
Tensor<T> vit_forward(const ViTModel<T>& model, const Tensor<T>& images, const DropMasks* masks,
                      std::type_identity_t<ForwardCache<T>>* cache) {
    if (masks && masks->size() != model.blocks.size()) {
        throw DimensionError("droppath masks for " + std::to_string(masks->size()) + " blocks, model has " +
                             std::to_string(model.blocks.size()));
    }
    Tensor<T> x = patch_embed(model, images);
    const std::size_t B = x.extent(0), T_ = x.extent(1), D = x.extent(2);
    if (cache) {
        cache->blocks.assign(model.blocks.size(), {});
        cache->masks = masks ? *masks : DropMasks{};
    }
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        const auto& blk = model.blocks[l];
        std::span<const std::vector<double>> attn_scales, mlp_scales;
        if (masks) {
            attn_scales = std::span<const std::vector<double>>((*masks)[l].data(), 4);
            mlp_scales = std::span<const std::vector<double>>((*masks)[l].data() + 4, 2);
        }
        BlockCache<T>* bc = cache ? &cache->blocks[l] : nullptr;
        const Tensor<T> h1 = layer_norm(x, blk.norm1.gamma, blk.norm1.beta);
        Tensor<T> mid = add(x, mhsa_forward(blk.attn, h1, model.config.heads, attn_scales, bc ? &bc->attn : nullptr));
        const Tensor<T> h2 = layer_norm(mid, blk.norm2.gamma, blk.norm2.beta);
        Tensor<T> out = add(mid, mlp_forward(blk.mlp, h2, mlp_scales, bc ? &bc->mlp : nullptr));
        if (bc) {
            bc->input = std::move(x);
            bc->mid = std::move(mid);
        }
        x = std::move(out);
    }
    Tensor<T> cls({B, D});
    for (std::size_t b = 0; b < B; ++b) {
        std::copy_n(x.row(b * T_).begin(), D, cls.row(b).begin());
    }
    Tensor<T> cls_norm = layer_norm(cls, model.norm.gamma, model.norm.beta);
    Tensor<T> logits = affine(model.head_weight, model.head_bias, cls_norm);
    if (cache) {
        cache->cls = std::move(cls);
        cache->cls_norm = std::move(cls_norm);
    }
    return logits;
}

template <typename T>
Tensor<T> vit_forward(const ViTModel<T>& model, const Tensor<T>& images) {
    return vit_forward(model, images, nullptr, nullptr);
}

template <typename T>
Tensor<T> vit_forward_train(const ViTModel<T>& model, const Tensor<T>& images, Rng& rng) {
    const DropMasks masks = draw_drop_masks(model, images.extent(0), rng);
    return vit_forward(model, images, &masks, nullptr);
}

template <typename T>
void vit_backward(const ViTModel<T>& model, const ForwardCache<T>& cache, const Tensor<T>& dlogits,
                  ViTModel<T>& grad) {
    accumulate_weight_grad(grad.head_weight, cache.cls_norm, dlogits);
    accumulate_bias_grad(grad.head_bias, dlogits);
    const Tensor<T> dcls_norm = linear_input_grad(model.head_weight, dlogits);
    const auto ln = layer_norm_backward(cache.cls, model.norm.gamma, dcls_norm);
    add_inplace(grad.norm.gamma, ln.gamma);
    add_inplace(grad.norm.beta, ln.beta);

    const std::size_t B = cache.cls.extent(0), D = cache.cls.extent(1);
    const std::size_t T_ = model.config.tokens();
    Tensor<T> dx({B, T_, D});
    for (std::size_t b = 0; b < B; ++b) std::copy_n(ln.input.row(b).begin(), D, dx.row(b * T_).begin());

    const bool has_masks = !cache.masks.empty();
    for (std::size_t l = model.blocks.size(); l-- > 0;) {
        const auto& blk = model.blocks[l];
        auto& gblk = grad.blocks[l];
        const auto& bc = cache.blocks[l];
        std::span<const std::vector<double>> attn_scales, mlp_scales;
        if (has_masks) {
            attn_scales = std::span<const std::vector<double>>(cache.masks[l].data(), 4);
            mlp_scales = std::span<const std::vector<double>>(cache.masks[l].data() + 4, 2);
        }
        const Tensor<T> dh2 = mlp_backward(blk.mlp, bc.mlp, mlp_scales, dx, gblk.mlp);
        const auto ln2 = layer_norm_backward(bc.mid, blk.norm2.gamma, dh2);
        add_inplace(gblk.norm2.gamma, ln2.gamma);
        add_inplace(gblk.norm2.beta, ln2.beta);
        add_inplace(dx, ln2.input);

        const Tensor<T> dh1 = mhsa_backward(blk.attn, bc.attn, model.config.heads, attn_scales, dx, gblk.attn);
        const auto ln1 = layer_norm_backward(bc.input, blk.norm1.gamma, dh1);
        add_inplace(gblk.norm1.gamma, ln1.gamma);
        add_inplace(gblk.norm1.beta, ln1.beta);
        add_inplace(dx, ln1.input);
    }
}

#define CONSOLIDATOR_INSTANTIATE(T)                                                                                 \
    template struct ViTModel<T>;                                                                                    \
    template void for_each_parameter<T>(                                                                            \
        const ViTModel<T>&, const std::function<void(const std::string&, const Tensor<T>&, ParamKind, bool)>&);     \
    template void for_each_parameter<T>(ViTModel<T>&,                                                               \
                                        const std::function<void(const std::string&, Tensor<T>&, ParamKind, bool)>&); \
    template Partition trainable_partition(const ViTModel<T>&);                                                     \
    template ViTModel<T> zeros_like(const ViTModel<T>&);                                                            \
    template ViTModel<T> init_backbone<T>(const ViTConfig&, std::uint64_t);                                         \
    template Checkpoint backbone_checkpoint(const ViTModel<T>&);                                                    \
    template Checkpoint model_checkpoint(const ViTModel<T>&);                                                       \
    template ViTModel<T> model_from_checkpoint<T>(const Checkpoint&);                                               \
    template ViTModel<T> attach_consolidators<T>(const Checkpoint&, const ViTConfig&);                              \
    template TaskDelta make_task_delta(const ViTModel<T>&);                                                         \
    template DropMasks draw_drop_masks(const ViTModel<T>&, std::size_t, Rng&);                                      \
    template Tensor<T> patch_embed(const ViTModel<T>&, const Tensor<T>&);                                           \
    template Tensor<T> mhsa_forward(const Attention<T>&, const Tensor<T>&, std::size_t,                            \
                                    std::span<const std::vector<double>>, AttentionCache<T>*);                      \
    template Tensor<T> mhsa_backward(const Attention<T>&, const AttentionCache<T>&, std::size_t,                   \
                                     std::span<const std::vector<double>>, const Tensor<T>&, Attention<T>&);        \
    template Tensor<T> mlp_forward(const Mlp<T>&, const Tensor<T>&, std::span<const std::vector<double>>,          \
                                   MlpCache<T>*);                                                                   \
    template Tensor<T> mlp_backward(const Mlp<T>&, const MlpCache<T>&, std::span<const std::vector<double>>,       \
                                    const Tensor<T>&, Mlp<T>&);                                                     \
    template Tensor<T> vit_forward(const ViTModel<T>&, const Tensor<T>&);                                           \
    template Tensor<T> vit_forward_train(const ViTModel<T>&, const Tensor<T>&, Rng&);                               \
    template Tensor<T> vit_forward<T>(const ViTModel<T>&, const Tensor<T>&, const DropMasks*, ForwardCache<T>*);       \
    template void vit_backward(const ViTModel<T>&, const ForwardCache<T>&, const Tensor<T>&, ViTModel<T>&);

CONSOLIDATOR_INSTANTIATE(float)
CONSOLIDATOR_INSTANTIATE(double)

#undef CONSOLIDATOR_INSTANTIATE

// Extended precision is used only as a forward-pass reference.
template struct ViTModel<long double>;
template void for_each_parameter<long double>(
    ViTModel<long double>&, const std::function<void(const std::string&, Tensor<long double>&, ParamKind, bool)>&);
template Tensor<long double> vit_forward<long double>(const ViTModel<long double>&, const Tensor<long double>&,
                                                      const DropMasks*, ForwardCache<long double>*);

}  // namespace consolidator
