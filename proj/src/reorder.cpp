#include "consolidator/reorder.hpp"

#include <numeric>
#include <stdexcept>
#include <string>

namespace consolidator {

Permutation::Permutation(std::vector<std::size_t> map) : map_(std::move(map)) {
    std::vector<bool> seen(map_.size(), false);
    for (auto m : map_) {
        if (m >= map_.size() || seen[m]) throw std::invalid_argument("index map is not a bijection");
        seen[m] = true;
    }
}

Permutation Permutation::identity(std::size_t size) {
    std::vector<std::size_t> map(size);
    std::iota(map.begin(), map.end(), std::size_t{0});
    return Permutation(std::move(map));
}

bool Permutation::is_identity() const {
    for (std::size_t k = 0; k < map_.size(); ++k) {
        if (map_[k] != k) return false;
    }
    return true;
}

Permutation Permutation::inverse() const {
    std::vector<std::size_t> inv(map_.size());
    for (std::size_t k = 0; k < map_.size(); ++k) inv[map_[k]] = k;
    return Permutation(std::move(inv));
}

Permutation Permutation::then(const Permutation& next) const {
    if (next.size() != size()) throw DimensionError("composing permutations of different sizes");
    // (next . this)(v)[k] = this(v)[next[k]] = v[map[next[k]]]
    std::vector<std::size_t> out(map_.size());
    for (std::size_t k = 0; k < map_.size(); ++k) out[k] = map_[next.map_[k]];
    return Permutation(std::move(out));
}

Permutation reorder_permutation(std::size_t groups, std::size_t channels) {
    if (groups == 0 || channels % groups != 0) throw GroupDivisibilityError(groups, channels);
    const std::size_t per_group = channels / groups;
    std::vector<std::size_t> map(channels);
    // output position b*g + a reads input position a*(D/g) + b
    for (std::size_t b = 0; b < per_group; ++b) {
        for (std::size_t a = 0; a < groups; ++a) map[b * groups + a] = a * per_group + b;
    }
    return Permutation(std::move(map));
}

template <typename T>
Tensor<T> permute_channels(const Permutation& perm, const Tensor<T>& x) {
    if (perm.size() != x.channels()) {
        throw DimensionError("permutation of size " + std::to_string(perm.size()) + " applied to " +
                             std::to_string(x.channels()) + " channels");
    }
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        auto yr = out.row(r);
        for (std::size_t k = 0; k < yr.size(); ++k) yr[k] = xr[perm[k]];
    }
    return out;
}

template <typename T>
Tensor<T> scatter_channels(const Permutation& perm, const Tensor<T>& dy) {
    if (perm.size() != dy.channels()) {
        throw DimensionError("permutation of size " + std::to_string(perm.size()) + " applied to " +
                             std::to_string(dy.channels()) + " channels");
    }
    Tensor<T> out(dy.shape());
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        auto gr = dy.row(r);
        auto yr = out.row(r);
        for (std::size_t k = 0; k < gr.size(); ++k) yr[perm[k]] = gr[k];
    }
    return out;
}

template <typename T>
Tensor<T> channel_reorder(std::size_t groups, const Tensor<T>& x) {
    return permute_channels(reorder_permutation(groups, x.channels()), x);
}

template <typename T>
Tensor<T> inverse_reorder(std::size_t groups, const Tensor<T>& x) {
    if (groups == 0 || x.channels() % groups != 0) throw GroupDivisibilityError(groups, x.channels());
    return channel_reorder(x.channels() / groups, x);
}

template <typename T>
Tensor<T> compact(const GCBranch<T>& branch, std::size_t out_channels, std::size_t in_channels) {
    check_groups(branch.groups, in_channels, out_channels);
    const std::size_t g = branch.groups;
    const std::size_t eb = out_channels / g;
    const std::size_t db = in_channels / g;
    if (branch.weight.shape() != Shape{g, eb, db}) {
        throw DimensionError("branch weight " + shape_to_string(branch.weight.shape()) + " does not fit " +
                             std::to_string(out_channels) + "x" + std::to_string(in_channels));
    }
    Tensor<T> dense({out_channels, in_channels});
    for (std::size_t j = 0; j < g; ++j) {
        for (std::size_t e = 0; e < eb; ++e) {
            for (std::size_t d = 0; d < db; ++d) {
                dense[(j * eb + e) * in_channels + j * db + d] = branch.weight[(j * eb + e) * db + d];
            }
        }
    }
    return dense;
}

template <typename T>
Tensor<T> scatter_columns(const Tensor<T>& matrix, const Permutation& perm) {
    if (matrix.rank() != 2 || matrix.extent(1) != perm.size()) {
        throw DimensionError("scatter_columns: matrix " + shape_to_string(matrix.shape()) + " vs permutation size " +
                             std::to_string(perm.size()));
    }
    return scatter_channels(perm, matrix);
}

std::vector<std::pair<std::size_t, std::size_t>> compact_support(std::size_t groups, std::size_t out_channels,
                                                                 std::size_t in_channels) {
    check_groups(groups, in_channels, out_channels);
    const std::size_t eb = out_channels / groups;
    const std::size_t db = in_channels / groups;
    std::vector<std::pair<std::size_t, std::size_t>> support;
    support.reserve(out_channels * db);
    for (std::size_t e = 0; e < out_channels; ++e) {
        const std::size_t j = e / eb;
        for (std::size_t d = 0; d < db; ++d) support.emplace_back(e, j * db + d);
    }
    return support;
}

#define CONSOLIDATOR_INSTANTIATE(T)                                                        \
    template Tensor<T> channel_reorder(std::size_t, const Tensor<T>&);                     \
    template Tensor<T> inverse_reorder(std::size_t, const Tensor<T>&);                     \
    template Tensor<T> permute_channels(const Permutation&, const Tensor<T>&);             \
    template Tensor<T> scatter_channels(const Permutation&, const Tensor<T>&);             \
    template Tensor<T> compact(const GCBranch<T>&, std::size_t, std::size_t);              \
    template Tensor<T> scatter_columns(const Tensor<T>&, const Permutation&);

CONSOLIDATOR_INSTANTIATE(float)
CONSOLIDATOR_INSTANTIATE(double)
CONSOLIDATOR_INSTANTIATE(long double)

#undef CONSOLIDATOR_INSTANTIATE

}  // namespace consolidator
