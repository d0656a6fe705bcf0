#include "consolidator/layer.hpp"

#include <algorithm>
#include <iostream>
#include <numeric>
#include <set>

#include "consolidator/reorder.hpp"

namespace consolidator {

template <typename T>
std::vector<std::size_t> ConsolidatorLayer<T>::groups() const {
    std::vector<std::size_t> g;
    for (const auto& b : branches) g.push_back(b.groups);
    return g;
}

template <typename T>
UnstructuredBranch<T> make_unstructured_branch(std::size_t nnz, std::size_t in_channels, std::size_t out_channels,
                                               Rng& rng) {
    const std::size_t total = in_channels * out_channels;
    if (nnz == 0 || nnz > total) {
        throw std::invalid_argument("unstructured support size " + std::to_string(nnz) + " outside 1.." +
                                    std::to_string(total));
    }
    // partial Fisher-Yates over the linear index range
    std::vector<std::size_t> idx(total);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < nnz; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, total - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(nnz);
    std::sort(idx.begin(), idx.end());
    return {Tensor<T>({out_channels, in_channels}), std::move(idx)};
}

template <typename T>
ConsolidatorLayer<T> init_layer(std::string name, Tensor<T> base_weight, Tensor<T> base_bias,
                                const std::vector<std::size_t>& groups, double droppath_p,
                                const LayerOptions& options) {
    if (base_weight.rank() != 2) {
        throw DimensionError("base weight of " + name + " must be a matrix, got " +
                             shape_to_string(base_weight.shape()));
    }
    if (base_bias.numel() != base_weight.extent(0)) {
        throw DimensionError("base bias of " + name + " has " + std::to_string(base_bias.numel()) +
                             " entries, expected " + std::to_string(base_weight.extent(0)));
    }
    if (!(droppath_p >= 0.0 && droppath_p <= 1.0)) {
        throw std::invalid_argument("droppath probability must lie in [0, 1]");
    }
    ConsolidatorLayer<T> layer;
    layer.name = std::move(name);
    layer.droppath_p = droppath_p;
    layer.tune_base_bias = options.tune_base_bias;
    const std::size_t in = base_weight.extent(1);
    const std::size_t out = base_weight.extent(0);
    std::set<std::size_t> seen;
    for (auto g : groups) {
        check_groups(g, in, out);
        if (!seen.insert(g).second) {
            std::clog << "warning: layer " << layer.name << " repeats group " << g
                      << "; the duplicate branch adds no stored support\n";
        }
        layer.branches.push_back(make_gc_branch<T>(g, in, out, options.reorder, options.branch_bias));
    }
    layer.base_weight = std::move(base_weight);
    layer.base_bias = std::move(base_bias);
    return layer;
}

template <typename T>
ConsolidatorLayer<T> zeros_like(const ConsolidatorLayer<T>& layer) {
    ConsolidatorLayer<T> z = layer;
    z.base_weight.fill(T(0));
    z.base_bias.fill(T(0));
    for (auto& b : z.branches) {
        b.weight.fill(T(0));
        b.bias.fill(T(0));
    }
    for (auto& u : z.unstructured) u.weight.fill(T(0));
    return z;
}

std::vector<double> draw_droppath_scales(double p, std::size_t samples, Rng& rng) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("droppath probability must lie in [0, 1]");
    std::bernoulli_distribution keep(1.0 - p);
    std::vector<double> scales(samples);
    for (auto& s : scales) s = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
    return scales;
}

namespace {

template <typename T>
void check_input(const ConsolidatorLayer<T>& layer, const Tensor<T>& x) {
    if (x.channels() != layer.in_channels()) {
        throw DimensionError("layer " + layer.name + " expects " + std::to_string(layer.in_channels()) +
                             " input channels, got " + std::to_string(x.channels()));
    }
}

template <typename T>
std::size_t rows_per_sample(const Tensor<T>& x, std::span<const double> scales) {
    if (scales.empty()) return x.rows();
    if (x.rank() < 2 || x.extent(0) != scales.size()) {
        throw DimensionError("droppath scales for " + std::to_string(scales.size()) + " samples, input " +
                             shape_to_string(x.shape()));
    }
    return x.rows() / scales.size();
}

template <typename T>
Tensor<T> unstructured_forward(const UnstructuredBranch<T>& u, const Tensor<T>& x) {
    const std::size_t in = u.weight.extent(1);
    Tensor<T> out(x.shape_with_channels(u.weight.extent(0)));
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        auto yr = out.row(r);
        std::vector<acc_t<T>> acc(yr.size(), 0);
        for (auto idx : u.support) acc[idx / in] += static_cast<acc_t<T>>(u.weight[idx]) * xr[idx % in];
        for (std::size_t e = 0; e < yr.size(); ++e) yr[e] = static_cast<T>(acc[e]);
    }
    return out;
}

}  // namespace

template <typename T>
Tensor<T> branch_sum(const ConsolidatorLayer<T>& layer, const Tensor<T>& x) {
    check_input(layer, x);
    Tensor<T> sum(x.shape_with_channels(layer.out_channels()));
    for (const auto& b : layer.branches) {
        const Tensor<T> xr = b.shuffle_groups == 1 ? x : channel_reorder(b.shuffle_groups, x);
        add_inplace(sum, gc_forward(b, xr));
    }
    for (const auto& u : layer.unstructured) add_inplace(sum, unstructured_forward(u, x));
    return sum;
}

template <typename T>
Tensor<T> forward(const ConsolidatorLayer<T>& layer, const Tensor<T>& x, std::span<const double> sample_scales) {
    check_input(layer, x);
    const std::size_t per_sample = rows_per_sample(x, sample_scales);
    Tensor<T> out = affine(layer.base_weight, layer.base_bias, x);
    if (!layer.has_branches()) return out;
    const Tensor<T> extra = branch_sum(layer, x);
    for (std::size_t r = 0; r < out.rows(); ++r) {
        const double scale = sample_scales.empty() ? 1.0 : sample_scales[r / per_sample];
        if (scale == 0.0) continue;
        auto yr = out.row(r);
        auto er = extra.row(r);
        for (std::size_t e = 0; e < yr.size(); ++e) yr[e] = static_cast<T>(yr[e] + scale * er[e]);
    }
    return out;
}

template <typename T>
Tensor<T> forward_eval(const ConsolidatorLayer<T>& layer, const Tensor<T>& x) {
    return forward(layer, x, {});
}

template <typename T>
Tensor<T> forward_train(const ConsolidatorLayer<T>& layer, const Tensor<T>& x, Rng& rng) {
    const std::size_t samples = x.rank() < 2 ? 1 : x.extent(0);
    const auto scales = draw_droppath_scales(layer.droppath_p, samples, rng);
    if (x.rank() < 2) return forward(layer, x.reshaped({1, x.numel()}), scales).reshaped({layer.out_channels()});
    return forward(layer, x, scales);
}

template <typename T>
Tensor<T> backward(const ConsolidatorLayer<T>& layer, const Tensor<T>& x, std::span<const double> sample_scales,
                   const Tensor<T>& dy, ConsolidatorLayer<T>& grad) {
    check_input(layer, x);
    const std::size_t per_sample = rows_per_sample(x, sample_scales);
    if (layer.tune_base_bias) accumulate_bias_grad(grad.base_bias, dy);
    Tensor<T> dx = linear_input_grad(layer.base_weight, dy);
    if (!layer.has_branches()) return dx;

    Tensor<T> scaled = dy;
    if (!sample_scales.empty()) {
        for (std::size_t r = 0; r < scaled.rows(); ++r) {
            const double s = sample_scales[r / per_sample];
            for (auto& v : scaled.row(r)) v = static_cast<T>(v * s);
        }
    }
    for (std::size_t i = 0; i < layer.branches.size(); ++i) {
        const auto& b = layer.branches[i];
        if (b.shuffle_groups == 1) {
            add_inplace(dx, gc_backward(b, x, scaled, grad.branches[i]));
        } else {
            const Permutation perm = reorder_permutation(b.shuffle_groups, x.channels());
            const Tensor<T> dxr = gc_backward(b, permute_channels(perm, x), scaled, grad.branches[i]);
            add_inplace(dx, scatter_channels(perm, dxr));
        }
    }
    const std::size_t in = layer.in_channels();
    for (std::size_t i = 0; i < layer.unstructured.size(); ++i) {
        const auto& u = layer.unstructured[i];
        auto& gw = grad.unstructured[i].weight;
        for (std::size_t r = 0; r < x.rows(); ++r) {
            auto xr = x.row(r);
            auto gr = scaled.row(r);
            auto dxr = dx.row(r);
            for (auto idx : u.support) {
                const std::size_t e = idx / in, d = idx % in;
                gw[idx] = static_cast<T>(gw[idx] + static_cast<double>(gr[e]) * xr[d]);
                dxr[d] = static_cast<T>(dxr[d] + static_cast<double>(gr[e]) * u.weight[idx]);
            }
        }
    }
    return dx;
}

#define CONSOLIDATOR_INSTANTIATE(T)                                                                                  \
    template struct ConsolidatorLayer<T>;                                                                            \
    template UnstructuredBranch<T> make_unstructured_branch<T>(std::size_t, std::size_t, std::size_t, Rng&);         \
    template ConsolidatorLayer<T> init_layer(std::string, Tensor<T>, Tensor<T>, const std::vector<std::size_t>&,     \
                                             double, const LayerOptions&);                                           \
    template ConsolidatorLayer<T> zeros_like(const ConsolidatorLayer<T>&);                                           \
    template Tensor<T> branch_sum(const ConsolidatorLayer<T>&, const Tensor<T>&);                                    \
    template Tensor<T> forward(const ConsolidatorLayer<T>&, const Tensor<T>&, std::span<const double>);              \
    template Tensor<T> forward_eval(const ConsolidatorLayer<T>&, const Tensor<T>&);                                  \
    template Tensor<T> forward_train(const ConsolidatorLayer<T>&, const Tensor<T>&, Rng&);                           \
    template Tensor<T> backward(const ConsolidatorLayer<T>&, const Tensor<T>&, std::span<const double>,              \
                                const Tensor<T>&, ConsolidatorLayer<T>&);

CONSOLIDATOR_INSTANTIATE(float)
CONSOLIDATOR_INSTANTIATE(double)
CONSOLIDATOR_INSTANTIATE(long double)

#undef CONSOLIDATOR_INSTANTIATE

}  // namespace consolidator
