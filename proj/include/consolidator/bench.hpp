#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "consolidator/vit.hpp"

namespace consolidator {

struct BenchResult {
    std::string label;
    double images_per_second = 0.0;  ///< median over samples
    std::vector<double> samples;     ///< images/s of each timed forward
};

struct BenchOptions {
    std::size_t batch = 32;
    std::size_t reps = 15;
    std::size_t warmup = 2;
    std::size_t iterations = 4;  ///< forwards per timed rep
    std::uint64_t seed = 0;
};

/// Eval-mode forward throughput for each model on the same images, measured
/// in process CPU time. Forwards are interleaved round-robin across models.
template <typename T>
std::vector<BenchResult> bench_throughput(const std::vector<const ViTModel<T>*>& models,
                                          const std::vector<std::string>& labels, const BenchOptions& options);

double median(std::vector<double> values);

/// Median of num/den throughput over paired samples.
double median_ratio(const BenchResult& num, const BenchResult& den);

}  // namespace consolidator
