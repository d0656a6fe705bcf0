#include "consolidator/budget.hpp"

#include <array>

namespace consolidator {

std::size_t backbone_parameter_count(const ViTConfig& c) {
    const std::size_t D = c.dim, H = c.hidden();
    std::size_t n = D * c.patch_dim() + D + D + c.tokens() * D;
    const std::size_t per_block = 4 * (D * D + D) + (H * D + H) + (D * H + D) + 4 * D;
    n += c.depth * per_block;
    n += 2 * D + c.classes * D + c.classes;
    return n;
}

ParameterBudget compute_budget(const ViTConfig& config, const std::vector<std::size_t>& groups,
                               const BudgetOptions& options) {
    ViTConfig checked = config;
    checked.groups = groups;
    checked.validate();
    const std::size_t D = config.dim, H = config.hidden();
    const std::array<std::pair<std::size_t, std::size_t>, 6> shapes = {
        {{D, D}, {D, D}, {D, D}, {D, D}, {H, D}, {D, H}}};  // (out, in)

    ParameterBudget b;
    const bool any_bias = options.tune_base_bias || (options.branch_bias && !groups.empty());
    for (const auto& [out, in] : shapes) {
        for (auto g : groups) b.tuned_weights += gc_param_count(g, in, out).weights;
        if (options.tune_base_bias) b.tuned_biases += out;
        if (options.branch_bias) b.tuned_biases += out * groups.size();
        b.stored_weights_per_block += support_union(groups, in, out, options.reorder).nnz;
        if (any_bias) b.stored_biases_per_block += out;
    }
    b.tuned_weights *= config.depth;
    b.tuned_biases *= config.depth;
    b.stored_weights = b.stored_weights_per_block * config.depth;
    b.stored_biases = b.stored_biases_per_block * config.depth;
    if (options.include_layernorm) b.layernorm = config.depth * 4 * D + 2 * D;
    if (options.include_head) b.head = config.classes * D + config.classes;
    b.backbone_total = backbone_parameter_count(config);
    return b;
}

}  // namespace consolidator
