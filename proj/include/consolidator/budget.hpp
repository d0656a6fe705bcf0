#pragma once

#include <cstddef>
#include <vector>

#include "consolidator/vit.hpp"

namespace consolidator {

struct BudgetOptions {
    bool include_head = true;
    bool include_layernorm = true;
    bool reorder = true;
    bool branch_bias = true;
    bool tune_base_bias = true;
};

/// Tuned vs stored parameter accounting for consolidators on every FC layer
/// of a ViT. Stored weights are the deduplicated support union per layer.
struct ParameterBudget {
    std::size_t tuned_weights = 0;
    std::size_t tuned_biases = 0;
    std::size_t stored_weights = 0;
    std::size_t stored_biases = 0;
    std::size_t stored_weights_per_block = 0;
    std::size_t stored_biases_per_block = 0;
    std::size_t layernorm = 0;  ///< counted only when included
    std::size_t head = 0;       ///< counted only when included
    std::size_t backbone_total = 0;

    std::size_t tuned_total() const { return tuned_weights + tuned_biases + layernorm + head; }
    std::size_t stored_total() const { return stored_weights + stored_biases + layernorm + head; }
    double tuned_percent() const { return 100.0 * double(tuned_total()) / double(backbone_total); }
    double stored_percent() const { return 100.0 * double(stored_total()) / double(backbone_total); }
};

/// All parameters of the plain backbone (embeddings, blocks, final norm, head).
std::size_t backbone_parameter_count(const ViTConfig& config);

ParameterBudget compute_budget(const ViTConfig& config, const std::vector<std::size_t>& groups,
                               const BudgetOptions& options = {});

}  // namespace consolidator
