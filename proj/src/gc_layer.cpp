#include "consolidator/gc_layer.hpp"

#include <algorithm>
#include <vector>

namespace consolidator {

void check_groups(std::size_t groups, std::size_t in_channels, std::size_t out_channels) {
    if (groups == 0 || in_channels % groups != 0) throw GroupDivisibilityError(groups, in_channels);
    if (out_channels % groups != 0) throw GroupDivisibilityError(groups, out_channels);
}

ParamCount gc_param_count(std::size_t groups, std::size_t in_channels, std::size_t out_channels) {
    check_groups(groups, in_channels, out_channels);
    return {out_channels * in_channels / groups, out_channels};
}

template <typename T>
GCBranch<T> make_gc_branch(std::size_t groups, std::size_t in_channels, std::size_t out_channels, bool reorder,
                           bool bias) {
    check_groups(groups, in_channels, out_channels);
    GCBranch<T> b;
    b.groups = groups;
    b.shuffle_groups = reorder ? groups : 1;
    b.weight = Tensor<T>({groups, out_channels / groups, in_channels / groups});
    b.bias = Tensor<T>({out_channels});
    b.has_bias = bias;
    return b;
}

template <typename T>
Tensor<T> pad(const Tensor<T>& z, std::size_t j, std::size_t groups, std::size_t out_channels) {
    if (groups == 0 || out_channels % groups != 0) throw GroupDivisibilityError(groups, out_channels);
    if (j < 1 || j > groups) {
        throw IndexError("group index " + std::to_string(j) + " outside 1.." + std::to_string(groups));
    }
    const std::size_t block = out_channels / groups;
    if (z.numel() != block) {
        throw DimensionError("pad input has " + std::to_string(z.numel()) + " entries, expected " +
                             std::to_string(block));
    }
    Tensor<T> out({out_channels});
    std::copy(z.data().begin(), z.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>((j - 1) * block));
    return out;
}

namespace {

template <typename T>
void check_branch_input(const GCBranch<T>& branch, const Tensor<T>& x) {
    if (branch.weight.rank() != 3 || branch.weight.extent(0) != branch.groups) {
        throw DimensionError("branch weight must be groups x E/g x D/g, got " + shape_to_string(branch.weight.shape()));
    }
    if (x.channels() != branch.in_channels()) {
        throw DimensionError("branch input trailing extent " + std::to_string(x.channels()) + ", expected " +
                             std::to_string(branch.in_channels()));
    }
}

}  // namespace

template <typename T>
Tensor<T> gc_forward(const GCBranch<T>& branch, const Tensor<T>& x) {
    check_branch_input(branch, x);
    const std::size_t g = branch.groups;
    const std::size_t eb = branch.weight.extent(1);
    const std::size_t db = branch.weight.extent(2);
    const std::size_t out_ch = eb * g;
    Tensor<T> out(x.shape_with_channels(out_ch));
    const T* w = branch.weight.data().data();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        auto yr = out.row(r);
        for (std::size_t j = 0; j < g; ++j) {
            const T* xs = xr.data() + j * db;
            for (std::size_t e = 0; e < eb; ++e) {
                const T* we = w + (j * eb + e) * db;
                acc_t<T> acc = 0;
                for (std::size_t d = 0; d < db; ++d) acc += static_cast<acc_t<T>>(we[d]) * static_cast<acc_t<T>>(xs[d]);
                yr[j * eb + e] = static_cast<T>(acc + static_cast<acc_t<T>>(branch.bias[j * eb + e]));
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> gc_backward(const GCBranch<T>& branch, const Tensor<T>& x, const Tensor<T>& dy, GCBranch<T>& grad) {
    check_branch_input(branch, x);
    const std::size_t g = branch.groups;
    const std::size_t eb = branch.weight.extent(1);
    const std::size_t db = branch.weight.extent(2);
    if (dy.channels() != eb * g || dy.rows() != x.rows()) {
        throw DimensionError("gc_backward output gradient " + shape_to_string(dy.shape()));
    }
    Tensor<T> dx(x.shape());
    std::vector<double> dw(branch.weight.numel(), 0.0);
    std::vector<double> dxr(x.channels());
    const T* w = branch.weight.data().data();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        auto gr = dy.row(r);
        std::fill(dxr.begin(), dxr.end(), 0.0);
        for (std::size_t j = 0; j < g; ++j) {
            for (std::size_t e = 0; e < eb; ++e) {
                const double ge = gr[j * eb + e];
                if (ge == 0.0) continue;
                const std::size_t base = (j * eb + e) * db;
                for (std::size_t d = 0; d < db; ++d) {
                    dw[base + d] += ge * static_cast<double>(xr[j * db + d]);
                    dxr[j * db + d] += ge * static_cast<double>(w[base + d]);
                }
            }
        }
        auto out = dx.row(r);
        for (std::size_t d = 0; d < out.size(); ++d) out[d] = static_cast<T>(dxr[d]);
    }
    for (std::size_t i = 0; i < dw.size(); ++i) grad.weight[i] = static_cast<T>(grad.weight[i] + dw[i]);
    if (branch.has_bias) accumulate_bias_grad(grad.bias, dy);
    return dx;
}

#define CONSOLIDATOR_INSTANTIATE(T)                                                                         \
    template GCBranch<T> make_gc_branch<T>(std::size_t, std::size_t, std::size_t, bool, bool);              \
    template Tensor<T> pad(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                       \
    template Tensor<T> gc_forward(const GCBranch<T>&, const Tensor<T>&);                                    \
    template Tensor<T> gc_backward(const GCBranch<T>&, const Tensor<T>&, const Tensor<T>&, GCBranch<T>&);

CONSOLIDATOR_INSTANTIATE(float)
CONSOLIDATOR_INSTANTIATE(double)
CONSOLIDATOR_INSTANTIATE(long double)

#undef CONSOLIDATOR_INSTANTIATE

}  // namespace consolidator
