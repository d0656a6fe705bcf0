#include "consolidator/verify.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace consolidator {

void Deviation::merge(const Deviation& o) {
    max_abs = std::max(max_abs, o.max_abs);
    max_rel = std::max(max_rel, o.max_rel);
}

template <typename T>
Deviation compare_outputs(const Tensor<T>& actual, const Tensor<T>& reference) {
    Deviation d;
    d.max_abs = max_abs_diff(actual, reference);
    const double scale = max_abs(reference);
    d.max_rel = scale > 0.0 ? d.max_abs / scale : d.max_abs;
    return d;
}

template <typename T>
Tensor<T> random_images(const ViTConfig& config, std::size_t batch, Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Tensor<T> images({batch, config.channels, config.image_size, config.image_size});
    for (auto& v : images.data()) v = static_cast<T>(dist(rng));
    return images;
}

template <typename T>
EquivalenceReport verify_equivalence(const ViTModel<T>& unmerged, const Checkpoint& merged, std::size_t samples,
                                     double tolerance, std::uint64_t seed) {
    const ViTModel<T> plain = model_from_checkpoint<T>(merged);
    if (!plain.config.same_architecture(unmerged.config)) {
        throw StructuralError("merged checkpoint architecture differs from the unmerged model");
    }
    for (const auto* layer : plain.layers()) {
        if (layer->has_branches()) throw StructuralError("merged checkpoint still carries branches");
    }
    EquivalenceReport report;
    report.samples = samples;
    report.tolerance = tolerance;
    Rng rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);

    const auto live = unmerged.layers();
    const auto flat = plain.layers();
    for (std::size_t i = 0; i < live.size(); ++i) {
        Tensor<T> x({samples, live[i]->in_channels()});
        for (auto& v : x.data()) v = static_cast<T>(dist(rng));
        const Tensor<T> expect = forward_eval(*live[i], x);
        const Tensor<T> got = affine(flat[i]->base_weight, flat[i]->base_bias, x);
        report.layers.push_back({live[i]->name, compare_outputs(expect, got)});
    }

    constexpr std::size_t kChunk = 32;
    for (std::size_t done = 0; done < samples; done += kChunk) {
        const std::size_t n = std::min(kChunk, samples - done);
        const Tensor<T> images = random_images<T>(unmerged.config, n, rng);
        report.logits.merge(compare_outputs(vit_forward(unmerged, images), vit_forward(plain, images)));
    }

    report.pass = report.logits.max_rel <= tolerance;
    for (const auto& l : report.layers) report.pass = report.pass && l.deviation.max_rel <= tolerance;
    return report;
}

#define CONSOLIDATOR_INSTANTIATE(T)                                                                             \
    template Deviation compare_outputs(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> random_images<T>(const ViTConfig&, std::size_t, Rng&);                                   \
    template EquivalenceReport verify_equivalence(const ViTModel<T>&, const Checkpoint&, std::size_t, double,   \
                                                  std::uint64_t);

CONSOLIDATOR_INSTANTIATE(float)
CONSOLIDATOR_INSTANTIATE(double)

#undef CONSOLIDATOR_INSTANTIATE

}  // namespace consolidator
