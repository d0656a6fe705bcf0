#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "consolidator/gc_layer.hpp"
#include "consolidator/tensor.hpp"

namespace consolidator {

/// Gather-style index map: applying it to v yields out[k] = v[map[k]].
class Permutation {
public:
    Permutation() = default;
    /// Throws std::invalid_argument unless map is a bijection on [0, size).
    explicit Permutation(std::vector<std::size_t> map);

    static Permutation identity(std::size_t size);

    std::size_t size() const noexcept { return map_.size(); }
    std::size_t operator[](std::size_t k) const { return map_[k]; }
    const std::vector<std::size_t>& map() const noexcept { return map_; }

    bool is_identity() const;
    Permutation inverse() const;

    /// Applying `*this` and then `next` in one step.
    Permutation then(const Permutation& next) const;

    template <typename V>
    std::vector<V> apply(std::span<const V> v) const {
        std::vector<V> out(map_.size());
        for (std::size_t k = 0; k < map_.size(); ++k) out[k] = v[map_[k]];
        return out;
    }

    friend bool operator==(const Permutation&, const Permutation&) = default;

private:
    std::vector<std::size_t> map_;
};

/// reshape(..., g, D/g) -> swap last two axes -> reshape(..., D), as an index map.
Permutation reorder_permutation(std::size_t groups, std::size_t channels);

template <typename T>
Tensor<T> channel_reorder(std::size_t groups, const Tensor<T>& x);

/// Undoes channel_reorder(groups, .); equal to channel_reorder(D / groups, .).
template <typename T>
Tensor<T> inverse_reorder(std::size_t groups, const Tensor<T>& x);

/// Gathers x along the trailing axis through `perm`.
template <typename T>
Tensor<T> permute_channels(const Permutation& perm, const Tensor<T>& x);

/// Transpose of permute_channels: out[..., perm[k]] = dy[..., k].
template <typename T>
Tensor<T> scatter_channels(const Permutation& perm, const Tensor<T>& dy);

/// Dense E x D block-diagonal embedding of a branch weight: block j sits at
/// rows [j E/g, (j+1) E/g) and columns [j D/g, (j+1) D/g).
template <typename T>
Tensor<T> compact(const GCBranch<T>& branch, std::size_t out_channels, std::size_t in_channels);

/// Moves column k of an E x D matrix to column perm[k]. Turns a weight that
/// acts on permuted input into one that acts on the raw input.
template <typename T>
Tensor<T> scatter_columns(const Tensor<T>& matrix, const Permutation& perm);

/// Structural support of compact(): (row, col) pairs in row-major order.
std::vector<std::pair<std::size_t, std::size_t>> compact_support(std::size_t groups, std::size_t out_channels,
                                                                 std::size_t in_channels);

}  // namespace consolidator
