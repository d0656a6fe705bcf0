#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "consolidator/gc_layer.hpp"
#include "consolidator/tensor.hpp"

namespace consolidator {

using Rng = std::mt19937_64;

/// Dense E x D branch restricted to a fixed random support (the
/// unstructured-sparsity ablation). Off-support weights stay zero.
template <typename T>
struct UnstructuredBranch {
    Tensor<T> weight;                  ///< E x D
    std::vector<std::size_t> support;  ///< sorted row-major linear indices
};

template <typename T>
UnstructuredBranch<T> make_unstructured_branch(std::size_t nnz, std::size_t in_channels, std::size_t out_channels,
                                               Rng& rng);

struct LayerOptions {
    bool reorder = true;
    bool branch_bias = true;
    bool tune_base_bias = true;
};

/// A frozen FC layer with a multi-branch grouped adapter next to it.
template <typename T>
struct ConsolidatorLayer {
    std::string name;
    Tensor<T> base_weight;  ///< E x D, frozen
    Tensor<T> base_bias;    ///< E
    std::vector<GCBranch<T>> branches;
    std::vector<UnstructuredBranch<T>> unstructured;
    double droppath_p = 0.0;
    bool tune_base_bias = true;

    std::size_t in_channels() const { return base_weight.extent(1); }
    std::size_t out_channels() const { return base_weight.extent(0); }
    bool has_branches() const { return !branches.empty() || !unstructured.empty(); }
    std::vector<std::size_t> groups() const;
};

/// Builds a layer with all branch parameters zero, so its eval forward starts
/// out equal to the frozen FC. Duplicate groups are accepted with a warning on
/// std::clog since they add no support.
template <typename T>
ConsolidatorLayer<T> init_layer(std::string name, Tensor<T> base_weight, Tensor<T> base_bias,
                                const std::vector<std::size_t>& groups, double droppath_p,
                                const LayerOptions& options = {});

/// Same layout with every tensor zeroed; used as a gradient accumulator.
template <typename T>
ConsolidatorLayer<T> zeros_like(const ConsolidatorLayer<T>& layer);

/// Inverted-droppath scale per sample: 0 when dropped, 1/(1-p) when kept.
std::vector<double> draw_droppath_scales(double p, std::size_t samples, Rng& rng);

/// Sum of all branch outputs (reorder -> grouped map, plus unstructured).
template <typename T>
Tensor<T> branch_sum(const ConsolidatorLayer<T>& layer, const Tensor<T>& x);

/// Base affine plus scaled branch sum. `sample_scales` holds one entry per
/// leading-axis sample; empty means every sample is kept with scale 1.
template <typename T>
Tensor<T> forward(const ConsolidatorLayer<T>& layer, const Tensor<T>& x, std::span<const double> sample_scales);

template <typename T>
Tensor<T> forward_eval(const ConsolidatorLayer<T>& layer, const Tensor<T>& x);

/// Draws one droppath mask per sample (leading axis) and runs forward.
template <typename T>
Tensor<T> forward_train(const ConsolidatorLayer<T>& layer, const Tensor<T>& x, Rng& rng);

/// Backward of forward(). Accumulates into the trainable slots of `grad`
/// (base bias, branch weights and biases); base_weight is never touched.
template <typename T>
Tensor<T> backward(const ConsolidatorLayer<T>& layer, const Tensor<T>& x, std::span<const double> sample_scales,
                   const Tensor<T>& dy, ConsolidatorLayer<T>& grad);

}  // namespace consolidator
