#include "consolidator/consolidate.hpp"

#include <algorithm>
#include <sstream>

#include "consolidator/reorder.hpp"

namespace consolidator {

Tensor<double> SparseWeightDelta::densify() const {
    Tensor<double> dense({rows, cols});
    for (const auto& e : entries) dense[e.row * cols + e.col] += e.value;
    return dense;
}

void SparseWeightDelta::validate() const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        if (e.row >= rows || e.col >= cols) {
            throw std::invalid_argument("sparse entry (" + std::to_string(e.row) + ", " + std::to_string(e.col) +
                                        ") outside " + std::to_string(rows) + "x" + std::to_string(cols));
        }
        if (i > 0) {
            const auto& p = entries[i - 1];
            if (std::pair(p.row, p.col) >= std::pair(e.row, e.col)) {
                throw std::invalid_argument("sparse entries not strictly increasing at index " + std::to_string(i));
            }
        }
    }
}

std::vector<std::string> TaskDelta::replaced_names() const {
    std::vector<std::string> names;
    for (const auto& l : layers) names.push_back(l.name + ".bias");
    for (const auto& n : extras.names()) names.push_back(n);
    return names;
}

std::size_t TaskDelta::stored_parameter_count() const {
    std::size_t n = extras.parameter_count();
    for (const auto& l : layers) n += l.weight.nnz() + l.bias.size();
    return n;
}

std::uint32_t branch_tag(std::size_t groups, std::size_t shuffle_groups) {
    const auto g = static_cast<std::uint32_t>(groups);
    return shuffle_groups == 1 && groups != 1 ? (g | kUnshuffledFlag) : g;
}

namespace {

void collect_support(std::vector<std::size_t>& linear, std::size_t groups, bool reorder, std::size_t in_channels,
                     std::size_t out_channels) {
    const auto support = compact_support(groups, out_channels, in_channels);
    const Permutation perm = reorder ? reorder_permutation(groups, in_channels) : Permutation::identity(in_channels);
    for (const auto& [r, c] : support) linear.push_back(r * in_channels + perm[c]);
}

SupportUnion finish_union(std::vector<std::size_t> linear, std::size_t in_channels) {
    std::sort(linear.begin(), linear.end());
    linear.erase(std::unique(linear.begin(), linear.end()), linear.end());
    SupportUnion u;
    u.nnz = linear.size();
    u.positions.reserve(linear.size());
    for (auto idx : linear) u.positions.emplace_back(idx / in_channels, idx % in_channels);
    return u;
}

}  // namespace

SupportUnion support_union(const std::vector<std::size_t>& groups, std::size_t in_channels,
                           std::size_t out_channels, bool reorder) {
    std::vector<std::size_t> linear;
    for (auto g : groups) collect_support(linear, g, reorder, in_channels, out_channels);
    return finish_union(std::move(linear), in_channels);
}

SupportUnion support_union_tags(const std::vector<std::uint32_t>& tags, std::size_t in_channels,
                                std::size_t out_channels) {
    std::vector<std::size_t> linear;
    for (auto tag : tags) {
        if (tag == kUnstructuredTag) throw std::invalid_argument("unstructured branch has no structural support");
        const bool reorder = (tag & kUnshuffledFlag) == 0;
        collect_support(linear, tag & ~kUnshuffledFlag, reorder, in_channels, out_channels);
    }
    return finish_union(std::move(linear), in_channels);
}

template <typename T>
LayerDelta consolidate_layer(const ConsolidatorLayer<T>& layer) {
    const std::size_t rows = layer.out_channels();
    const std::size_t cols = layer.in_channels();
    std::vector<T> acc(rows * cols, T(0));
    std::vector<bool> on_support(rows * cols, false);
    std::vector<std::uint32_t> tags;

    for (const auto& b : layer.branches) {
        tags.push_back(branch_tag(b.groups, b.shuffle_groups));
        const Permutation perm = b.shuffle_groups == 1 ? Permutation::identity(cols)
                                                       : reorder_permutation(b.shuffle_groups, cols);
        const std::size_t eb = rows / b.groups;
        const std::size_t db = cols / b.groups;
        for (std::size_t e = 0; e < rows; ++e) {
            const std::size_t j = e / eb;
            for (std::size_t d = 0; d < db; ++d) {
                const std::size_t idx = e * cols + perm[j * db + d];
                acc[idx] = static_cast<T>(acc[idx] + b.weight[e * db + d]);
                on_support[idx] = true;
            }
        }
    }
    for (const auto& u : layer.unstructured) {
        tags.push_back(kUnstructuredTag);
        for (auto idx : u.support) {
            acc[idx] = static_cast<T>(acc[idx] + u.weight[idx]);
            on_support[idx] = true;
        }
    }

    LayerDelta delta;
    delta.name = layer.name;
    delta.weight.rows = rows;
    delta.weight.cols = cols;
    delta.weight.groups_meta = std::move(tags);
    for (std::size_t idx = 0; idx < acc.size(); ++idx) {
        if (on_support[idx]) {
            delta.weight.entries.push_back(
                {static_cast<std::uint32_t>(idx / cols), static_cast<std::uint32_t>(idx % cols), acc[idx]});
        }
    }
    delta.bias.resize(rows);
    for (std::size_t e = 0; e < rows; ++e) {
        T b = layer.base_bias[e];
        for (const auto& br : layer.branches) b = static_cast<T>(b + br.bias[e]);
        delta.bias[e] = b;
    }
    return delta;
}

template <typename T>
TaskDelta to_task_delta(const std::vector<const ConsolidatorLayer<T>*>& layers, Checkpoint extras,
                        std::uint64_t backbone_fingerprint) {
    TaskDelta delta;
    delta.backbone_fingerprint = backbone_fingerprint;
    for (const auto* l : layers) delta.layers.push_back(consolidate_layer(*l));
    delta.extras = std::move(extras);
    return delta;
}

std::uint64_t backbone_fingerprint(const Checkpoint& backbone, const TaskDelta& delta) {
    return fingerprint(backbone, delta.replaced_names());
}

namespace {

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << "0x" << std::hex << v;
    return os.str();
}

}  // namespace

Checkpoint apply_delta(const Checkpoint& backbone, const TaskDelta& delta) {
    for (const auto& l : delta.layers) {
        for (const char* suffix : {".weight", ".bias"}) {
            if (!backbone.contains(l.name + suffix)) {
                throw StructuralError("delta layer '" + l.name + "' has no backbone tensor '" + l.name + suffix + "'");
            }
        }
    }
    for (const auto& e : delta.extras.entries()) {
        if (!backbone.contains(e.name)) throw StructuralError("delta tensor '" + e.name + "' is not in the backbone");
    }
    const std::uint64_t fp = backbone_fingerprint(backbone, delta);
    if (fp != delta.backbone_fingerprint) {
        throw FingerprintMismatch("backbone fingerprint " + hex64(fp) + " does not match delta fingerprint " +
                                  hex64(delta.backbone_fingerprint));
    }

    Checkpoint merged = backbone;
    for (const auto& l : delta.layers) {
        l.weight.validate();
        const auto& w = backbone.at(l.name + ".weight");
        if (w.shape() != Shape{l.weight.rows, l.weight.cols}) {
            throw StructuralError("layer '" + l.name + "' weight " + shape_to_string(w.shape()) + " vs delta " +
                                  std::to_string(l.weight.rows) + "x" + std::to_string(l.weight.cols));
        }
        const auto& b = backbone.at(l.name + ".bias");
        if (b.numel() != l.bias.size()) {
            throw StructuralError("layer '" + l.name + "' bias size " + std::to_string(b.numel()) + " vs delta " +
                                  std::to_string(l.bias.size()));
        }
        auto merge = [&](const auto& base_w, const auto& base_b) {
            using V = typename std::decay_t<decltype(base_w)>::value_type;
            Tensor<V> wn = base_w;
            for (const auto& e : l.weight.entries) {
                if (e.value == 0.0) continue;  // keeps -0.0 weights bit-identical
                auto& slot = wn[e.row * l.weight.cols + e.col];
                slot = static_cast<V>(static_cast<double>(slot) + e.value);
            }
            Tensor<V> bn(base_b.shape());
            for (std::size_t i = 0; i < l.bias.size(); ++i) bn[i] = static_cast<V>(l.bias[i]);
            merged.replace(l.name + ".weight", std::move(wn));
            merged.replace(l.name + ".bias", std::move(bn));
        };
        std::visit(
            [&](const auto& base_w) {
                std::visit([&](const auto& base_b) { merge(base_w, base_b); }, b.value);
            },
            w.value);
    }
    for (const auto& e : delta.extras.entries()) {
        const auto& target = backbone.at(e.name);
        if (target.shape() != e.shape()) {
            throw StructuralError("delta tensor '" + e.name + "' shape " + shape_to_string(e.shape()) +
                                  " vs backbone " + shape_to_string(target.shape()));
        }
        if (target.dtype() == DType::F32) {
            merged.replace(e.name, e.as<float>());
        } else {
            merged.replace(e.name, e.as<double>());
        }
    }
    return merged;
}

#define CONSOLIDATOR_INSTANTIATE(T)                                                                       \
    template LayerDelta consolidate_layer(const ConsolidatorLayer<T>&);                                   \
    template TaskDelta to_task_delta(const std::vector<const ConsolidatorLayer<T>*>&, Checkpoint, std::uint64_t);

CONSOLIDATOR_INSTANTIATE(float)
CONSOLIDATOR_INSTANTIATE(double)

#undef CONSOLIDATOR_INSTANTIATE

}  // namespace consolidator
