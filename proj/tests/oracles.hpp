#pragma once

// Naive reference implementations used only by the tests.

#include <cmath>
#include <cstddef>
#include <random>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include "consolidator/layer.hpp"
#include "consolidator/tensor.hpp"

namespace oracle {

using consolidator::Tensor;

template <typename T>
Tensor<T> randn(consolidator::Shape shape, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(n(rng));
    return t;
}

// y[r][e] = sum_d W[e][d] x[r][d] + b[e], accumulated in long double.
template <typename T>
std::vector<long double> matvec(const Tensor<T>& W, const Tensor<T>* b, const std::vector<long double>& x) {
    const std::size_t E = W.extent(0), D = W.extent(1);
    std::vector<long double> y(E, 0.0L);
    for (std::size_t e = 0; e < E; ++e) {
        long double s = b ? static_cast<long double>((*b)[e]) : 0.0L;
        for (std::size_t d = 0; d < D; ++d) s += static_cast<long double>(W[e * D + d]) * x[d];
        y[e] = s;
    }
    return y;
}

// Reshape to (g, D/g), transpose, flatten: the textbook shuffle.
template <typename V>
std::vector<V> shuffle(std::size_t g, const std::vector<V>& x) {
    const std::size_t D = x.size(), m = D / g;
    std::vector<std::vector<V>> grid(g, std::vector<V>(m));
    for (std::size_t a = 0; a < g; ++a)
        for (std::size_t b = 0; b < m; ++b) grid[a][b] = x[a * m + b];
    std::vector<V> out;
    for (std::size_t b = 0; b < m; ++b)
        for (std::size_t a = 0; a < g; ++a) out.push_back(grid[a][b]);
    return out;
}

// Output e of a grouped map (g groups, already shuffled input z).
inline std::vector<long double> grouped(const std::vector<std::vector<std::vector<long double>>>& w,
                                        const std::vector<long double>& z) {
    const std::size_t g = w.size(), eg = w[0].size(), dg = w[0][0].size();
    std::vector<long double> y(g * eg, 0.0L);
    for (std::size_t j = 0; j < g; ++j)
        for (std::size_t r = 0; r < eg; ++r)
            for (std::size_t c = 0; c < dg; ++c) y[j * eg + r] += w[j][r][c] * z[j * dg + c];
    return y;
}

// Support of the reordered grouped branches found by probing every input
// basis vector with all-ones group weights.
inline std::set<std::pair<std::size_t, std::size_t>> probe_support(const std::vector<std::size_t>& groups,
                                                                   std::size_t D, std::size_t E,
                                                                   bool reorder = true) {
    std::set<std::pair<std::size_t, std::size_t>> s;
    for (auto g : groups) {
        std::vector<std::vector<std::vector<long double>>> w(
            g, std::vector<std::vector<long double>>(E / g, std::vector<long double>(D / g, 1.0L)));
        for (std::size_t d = 0; d < D; ++d) {
            std::vector<long double> x(D, 0.0L);
            x[d] = 1.0L;
            const auto y = grouped(w, reorder ? shuffle(g, x) : x);
            for (std::size_t e = 0; e < E; ++e)
                if (y[e] != 0.0L) s.emplace(e, d);
        }
    }
    return s;
}

// Forward of one consolidator layer written from the definition: each branch
// shuffles the input, applies its blocks, adds its bias; the sum is scaled.
template <typename T>
std::vector<long double> layer_forward(const consolidator::ConsolidatorLayer<T>& layer,
                                       const std::vector<long double>& x, long double scale = 1.0L) {
    auto y = matvec(layer.base_weight, &layer.base_bias, x);
    for (const auto& br : layer.branches) {
        const std::size_t g = br.groups, eg = br.weight.extent(1), dg = br.weight.extent(2);
        std::vector<std::vector<std::vector<long double>>> w(
            g, std::vector<std::vector<long double>>(eg, std::vector<long double>(dg)));
        for (std::size_t j = 0; j < g; ++j)
            for (std::size_t r = 0; r < eg; ++r)
                for (std::size_t c = 0; c < dg; ++c) w[j][r][c] = br.weight[(j * eg + r) * dg + c];
        const auto z = br.shuffle_groups > 1 ? shuffle(br.shuffle_groups, x) : x;
        const auto yb = grouped(w, z);
        for (std::size_t e = 0; e < y.size(); ++e)
            y[e] += scale * (yb[e] + (br.has_bias ? static_cast<long double>(br.bias[e]) : 0.0L));
    }
    for (const auto& u : layer.unstructured) {
        const auto yu = matvec(u.weight, static_cast<const Tensor<T>*>(nullptr), x);
        for (std::size_t e = 0; e < y.size(); ++e) y[e] += scale * yu[e];
    }
    return y;
}

template <typename T>
std::vector<long double> to_ld(std::span<const T> v) {
    return std::vector<long double>(v.begin(), v.end());
}

}  // namespace oracle

namespace oracle {

// Fills every branch parameter of a layer with N(0, scale) values.
template <typename T>
void randomize(consolidator::ConsolidatorLayer<T>& layer, std::uint64_t seed, double scale = 0.1) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    for (auto& b : layer.branches) {
        for (auto& v : b.weight.data()) v = static_cast<T>(n(rng));
        if (b.has_bias)
            for (auto& v : b.bias.data()) v = static_cast<T>(n(rng));
    }
    for (auto& u : layer.unstructured)
        for (auto i : u.support) u.weight[i] = static_cast<T>(n(rng));
}

template <typename T>
consolidator::ConsolidatorLayer<T> random_layer(std::size_t in, std::size_t out, const std::vector<std::size_t>& groups,
                                                std::uint64_t seed, double p = 0.0,
                                                const consolidator::LayerOptions& options = {}) {
    auto layer = consolidator::init_layer<T>("fc", randn<T>({out, in}, seed, 0.3), randn<T>({out}, seed + 1, 0.3),
                                             groups, p, options);
    randomize(layer, seed + 2);
    return layer;
}

}  // namespace oracle
