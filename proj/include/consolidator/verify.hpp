#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "consolidator/checkpoint.hpp"
#include "consolidator/vit.hpp"

namespace consolidator {

/// Relative deviation is max|a - b| / max|b| over the compared tensor, with
/// the reference side b taken from the merged checkpoint.
struct Deviation {
    double max_abs = 0.0;
    double max_rel = 0.0;

    void merge(const Deviation& o);
};

struct LayerDeviation {
    std::string name;
    Deviation deviation;
};

struct EquivalenceReport {
    std::vector<LayerDeviation> layers;
    Deviation logits;
    std::size_t samples = 0;
    double tolerance = 0.0;
    bool pass = false;
};

template <typename T>
Deviation compare_outputs(const Tensor<T>& actual, const Tensor<T>& reference);

/// Runs the unmerged model (branches live, eval mode) and the merged plain
/// checkpoint on the same random inputs, layer by layer and end to end.
template <typename T>
EquivalenceReport verify_equivalence(const ViTModel<T>& unmerged, const Checkpoint& merged, std::size_t samples,
                                     double tolerance, std::uint64_t seed = 0);

/// Random images drawn from a standard normal, B x C x H x W.
template <typename T>
Tensor<T> random_images(const ViTConfig& config, std::size_t batch, Rng& rng);

}  // namespace consolidator
