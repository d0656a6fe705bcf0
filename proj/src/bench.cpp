#include "consolidator/bench.hpp"

#include <algorithm>
#include <ctime>
#include <stdexcept>

#include "consolidator/verify.hpp"

namespace consolidator {

double median(std::vector<double> values) {
    if (values.empty()) throw std::invalid_argument("median of empty set");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

template <typename T>
std::vector<BenchResult> bench_throughput(const std::vector<const ViTModel<T>*>& models,
                                          const std::vector<std::string>& labels, const BenchOptions& options) {
    if (models.empty() || models.size() != labels.size()) throw std::invalid_argument("bench: models/labels mismatch");
    if (options.batch == 0 || options.reps == 0 || options.iterations == 0) {
        throw std::invalid_argument("bench: batch, reps and iterations must be positive");
    }
    for (const auto* m : models) {
        if (!m->config.same_architecture(models.front()->config)) {
            throw StructuralError("bench: models do not share one architecture");
        }
    }
    Rng rng(options.seed);
    const Tensor<T> images = random_images<T>(models.front()->config, options.batch, rng);

    std::vector<BenchResult> results(models.size());
    for (std::size_t i = 0; i < models.size(); ++i) results[i].label = labels[i];
    volatile double sink = 0.0;
    auto forward_once = [&](const ViTModel<T>& m) { sink = sink + double(vit_forward(m, images)[0]); };
    for (std::size_t w = 0; w < options.warmup; ++w) {
        for (const auto* m : models) forward_once(*m);
    }
    // Process CPU time per forward, models taking turns, so time spent
    // descheduled and slow drift hit every model alike.
    for (std::size_t r = 0; r < options.reps; ++r) {
        for (std::size_t it = 0; it < options.iterations; ++it) {
            for (std::size_t k = 0; k < models.size(); ++k) {
                const std::size_t i = (k + r + it) % models.size();
                const std::clock_t start = std::clock();
                forward_once(*models[i]);
                const double s = double(std::clock() - start) / CLOCKS_PER_SEC;
                results[i].samples.push_back(double(options.batch) / std::max(s, 1e-9));
            }
        }
    }
    for (auto& r : results) r.images_per_second = median(r.samples);
    return results;
}

double median_ratio(const BenchResult& num, const BenchResult& den) {
    if (num.samples.size() != den.samples.size()) throw std::invalid_argument("median_ratio: rep counts differ");
    std::vector<double> r(num.samples.size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = num.samples[i] / den.samples[i];
    return median(std::move(r));
}

template std::vector<BenchResult> bench_throughput(const std::vector<const ViTModel<float>*>&,
                                                   const std::vector<std::string>&, const BenchOptions&);
template std::vector<BenchResult> bench_throughput(const std::vector<const ViTModel<double>*>&,
                                                   const std::vector<std::string>&, const BenchOptions&);

}  // namespace consolidator
