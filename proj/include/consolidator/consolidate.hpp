#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "consolidator/checkpoint.hpp"
#include "consolidator/layer.hpp"

namespace consolidator {

/// groups_meta tags. A plain value g is a reordered grouped branch.
inline constexpr std::uint32_t kUnstructuredTag = 0;
inline constexpr std::uint32_t kUnshuffledFlag = 0x80000000u;

struct SparseEntry {
    std::uint32_t row = 0;
    std::uint32_t col = 0;
    double value = 0.0;

    friend bool operator==(const SparseEntry&, const SparseEntry&) = default;
};

/// The single merged sparse weight stored per consolidated FC layer.
struct SparseWeightDelta {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<SparseEntry> entries;  ///< strictly increasing in row-major order
    std::vector<std::uint32_t> groups_meta;

    std::size_t nnz() const { return entries.size(); }
    Tensor<double> densify() const;
    /// Throws std::invalid_argument on unsorted, duplicate or out-of-range entries.
    void validate() const;

    friend bool operator==(const SparseWeightDelta&, const SparseWeightDelta&) = default;
};

struct LayerDelta {
    std::string name;  ///< layer prefix; tensors are name + ".weight" / ".bias"
    SparseWeightDelta weight;
    std::vector<double> bias;  ///< absolute merged bias

    friend bool operator==(const LayerDelta&, const LayerDelta&) = default;
};

/// Everything stored per downstream task.
struct TaskDelta {
    std::uint64_t backbone_fingerprint = 0;
    std::vector<LayerDelta> layers;
    Checkpoint extras;  ///< absolute LayerNorm and head tensors

    /// Backbone tensor names this delta overwrites outright.
    std::vector<std::string> replaced_names() const;
    std::size_t stored_parameter_count() const;

    friend bool operator==(const TaskDelta&, const TaskDelta&) = default;
};

std::uint32_t branch_tag(std::size_t groups, std::size_t shuffle_groups);

struct SupportUnion {
    std::vector<std::pair<std::size_t, std::size_t>> positions;  ///< sorted (row, col)
    std::size_t nnz = 0;
};

/// Union of the column-scattered structural supports of grouped branches
/// (all reordered, or none when `reorder` is false).
SupportUnion support_union(const std::vector<std::size_t>& groups, std::size_t in_channels,
                           std::size_t out_channels, bool reorder = true);

/// Same, over groups_meta tags. Unstructured tags are rejected.
SupportUnion support_union_tags(const std::vector<std::uint32_t>& tags, std::size_t in_channels,
                                std::size_t out_channels);

/// Training-storage merge of one layer: W~ = sum_i scatter(compact(W_i)),
/// b~ = base bias + sum_i b_i. Overlaps are summed in branch order at the
/// layer's precision.
template <typename T>
LayerDelta consolidate_layer(const ConsolidatorLayer<T>& layer);

/// Merges every layer and attaches the absolute extras.
template <typename T>
TaskDelta to_task_delta(const std::vector<const ConsolidatorLayer<T>*>& layers, Checkpoint extras,
                        std::uint64_t backbone_fingerprint);

/// Fingerprint of the backbone tensors that `delta` leaves frozen.
std::uint64_t backbone_fingerprint(const Checkpoint& backbone, const TaskDelta& delta);

/// Loading-inference merge: W^ = W + W~, b^ = b~, extras replaced. The result
/// has the backbone's exact tensor inventory and ordering.
Checkpoint apply_delta(const Checkpoint& backbone, const TaskDelta& delta);

}  // namespace consolidator
