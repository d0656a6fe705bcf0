#pragma once

#include <cstddef>

#include "consolidator/tensor.hpp"

namespace consolidator {

/// One grouped-connected branch mapping D input channels to E output
/// channels. Output group j only sees input group j.
template <typename T>
struct GCBranch {
    std::size_t groups = 1;
    /// Shuffle applied to the branch input before the grouped map. Equal to
    /// `groups` normally; 1 disables the reorder (ablation only).
    std::size_t shuffle_groups = 1;
    Tensor<T> weight;  ///< groups x (E/groups) x (D/groups)
    Tensor<T> bias;    ///< E
    bool has_bias = true;

    std::size_t in_channels() const { return weight.extent(2) * groups; }
    std::size_t out_channels() const { return weight.extent(1) * groups; }
};

/// Zero-valued branch. Throws GroupDivisibilityError unless g divides D and E.
template <typename T>
GCBranch<T> make_gc_branch(std::size_t groups, std::size_t in_channels, std::size_t out_channels,
                           bool reorder = true, bool bias = true);

/// Places z (length E/g) at group slot j (1-based) of a zero vector of length E.
template <typename T>
Tensor<T> pad(const Tensor<T>& z, std::size_t j, std::size_t groups, std::size_t out_channels);

/// Blockwise grouped map on input that has already been reordered.
template <typename T>
Tensor<T> gc_forward(const GCBranch<T>& branch, const Tensor<T>& x);

/// Backward of gc_forward. Accumulates weight/bias gradients into `grad`
/// (a branch of identical shape) and returns the input gradient.
template <typename T>
Tensor<T> gc_backward(const GCBranch<T>& branch, const Tensor<T>& x, const Tensor<T>& dy, GCBranch<T>& grad);

struct ParamCount {
    std::size_t weights = 0;
    std::size_t biases = 0;

    std::size_t total() const { return weights + biases; }
    friend bool operator==(const ParamCount&, const ParamCount&) = default;
};

ParamCount gc_param_count(std::size_t groups, std::size_t in_channels, std::size_t out_channels);

void check_groups(std::size_t groups, std::size_t in_channels, std::size_t out_channels);

}  // namespace consolidator
