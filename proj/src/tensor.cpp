#include "consolidator/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace consolidator {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace {

void check_extents(const Shape& shape) {
    for (auto e : shape) {
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
    }
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
}

template <typename T>
void check_vector(const Tensor<T>& v, std::size_t n, const char* what) {
    if (v.numel() != n) {
        throw DimensionError(std::string(what) + " has " + std::to_string(v.numel()) + " entries, expected " +
                             std::to_string(n));
    }
}

template <typename T>
void check_matrix_input(const Tensor<T>& weight, const Tensor<T>& x) {
    if (weight.rank() != 2) {
        throw DimensionError("weight must be a matrix, got " + shape_to_string(weight.shape()));
    }
    if (x.channels() != weight.extent(1)) {
        throw DimensionError("input trailing extent " + std::to_string(x.channels()) +
                             " does not match weight input extent " + std::to_string(weight.extent(1)));
    }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
    check_extents(shape_);
    data_.assign(shape_numel(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents(shape_);
    if (shape_numel(shape_) != data_.size()) {
        throw DimensionError("shape " + shape_to_string(shape_) + " holds " + std::to_string(shape_numel(shape_)) +
                             " values, got " + std::to_string(data_.size()));
    }
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
    return Tensor<T>(std::move(shape), data_);
}

template <typename T>
Shape Tensor<T>::shape_with_channels(std::size_t channels) const {
    Shape s = shape_.empty() ? Shape{1} : shape_;
    s.back() = channels;
    return s;
}

template <typename T>
void Tensor<T>::fill(T value) {
    std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool Tensor<T>::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
Tensor<T> affine(const Tensor<T>& weight, const Tensor<T>& bias, const Tensor<T>& x) {
    using A = acc_t<T>;
    check_matrix_input(weight, x);
    check_vector(bias, weight.extent(0), "bias");
    const std::size_t out_ch = weight.extent(0);
    const std::size_t in_ch = weight.extent(1);
    Tensor<T> out(x.shape_with_channels(out_ch));
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        auto yr = out.row(r);
        for (std::size_t e = 0; e < out_ch; ++e) {
            const T* w = weight.data().data() + e * in_ch;
            A acc = 0;
            for (std::size_t d = 0; d < in_ch; ++d) acc += static_cast<A>(w[d]) * static_cast<A>(xr[d]);
            yr[e] = static_cast<T>(acc + static_cast<A>(bias[e]));
        }
    }
    return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& weight, const Tensor<T>& x) {
    return affine(weight, Tensor<T>({weight.extent(0)}), x);
}

template <typename T>
Tensor<T> linear_input_grad(const Tensor<T>& weight, const Tensor<T>& dy) {
    if (weight.rank() != 2 || dy.channels() != weight.extent(0)) {
        throw DimensionError("linear_input_grad: weight " + shape_to_string(weight.shape()) + " vs grad " +
                             shape_to_string(dy.shape()));
    }
    const std::size_t out_ch = weight.extent(0);
    const std::size_t in_ch = weight.extent(1);
    Tensor<T> dx(dy.shape_with_channels(in_ch));
    std::vector<double> acc(in_ch);
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        std::fill(acc.begin(), acc.end(), 0.0);
        auto g = dy.row(r);
        for (std::size_t e = 0; e < out_ch; ++e) {
            const double ge = g[e];
            if (ge == 0.0) continue;
            const T* w = weight.data().data() + e * in_ch;
            for (std::size_t d = 0; d < in_ch; ++d) acc[d] += ge * static_cast<double>(w[d]);
        }
        auto out = dx.row(r);
        for (std::size_t d = 0; d < in_ch; ++d) out[d] = static_cast<T>(acc[d]);
    }
    return dx;
}

template <typename T>
void accumulate_weight_grad(Tensor<T>& grad_weight, const Tensor<T>& x, const Tensor<T>& dy) {
    const std::size_t out_ch = grad_weight.extent(0);
    const std::size_t in_ch = grad_weight.extent(1);
    if (x.channels() != in_ch || dy.channels() != out_ch || x.rows() != dy.rows()) {
        throw DimensionError("accumulate_weight_grad: grad " + shape_to_string(grad_weight.shape()) + ", input " +
                             shape_to_string(x.shape()) + ", output grad " + shape_to_string(dy.shape()));
    }
    std::vector<double> acc(out_ch * in_ch, 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        auto g = dy.row(r);
        for (std::size_t e = 0; e < out_ch; ++e) {
            const double ge = g[e];
            if (ge == 0.0) continue;
            double* a = acc.data() + e * in_ch;
            for (std::size_t d = 0; d < in_ch; ++d) a[d] += ge * static_cast<double>(xr[d]);
        }
    }
    for (std::size_t i = 0; i < acc.size(); ++i) grad_weight[i] = static_cast<T>(grad_weight[i] + acc[i]);
}

template <typename T>
void accumulate_bias_grad(Tensor<T>& grad_bias, const Tensor<T>& dy) {
    check_vector(grad_bias, dy.channels(), "bias gradient");
    std::vector<double> acc(dy.channels(), 0.0);
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        auto g = dy.row(r);
        for (std::size_t e = 0; e < g.size(); ++e) acc[e] += g[e];
    }
    for (std::size_t e = 0; e < acc.size(); ++e) grad_bias[e] = static_cast<T>(grad_bias[e] + acc[e]);
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
    using A = acc_t<T>;
    const std::size_t n = x.channels();
    check_vector(gamma, n, "layer_norm gamma");
    check_vector(beta, n, "layer_norm beta");
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        A mean = 0;
        for (auto v : xr) mean += v;
        mean /= static_cast<A>(n);
        A var = 0;
        for (auto v : xr) var += (v - mean) * (v - mean);
        var /= static_cast<A>(n);
        const A rstd = A(1) / std::sqrt(var + static_cast<A>(eps));
        auto yr = out.row(r);
        for (std::size_t i = 0; i < n; ++i) {
            yr[i] = static_cast<T>(static_cast<A>(gamma[i]) * (xr[i] - mean) * rstd + beta[i]);
        }
    }
    return out;
}

template <typename T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& dy, double eps) {
    const std::size_t n = x.channels();
    check_vector(gamma, n, "layer_norm gamma");
    check_same_shape(x, dy, "layer_norm_backward");
    LayerNormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({n}), Tensor<T>({n})};
    std::vector<double> dgamma(n, 0.0), dbeta(n, 0.0), xhat(n), dxhat(n);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        auto gr = dy.row(r);
        double mean = 0.0;
        for (auto v : xr) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (auto v : xr) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        const double rstd = 1.0 / std::sqrt(var + eps);
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            xhat[i] = (xr[i] - mean) * rstd;
            dxhat[i] = static_cast<double>(gr[i]) * gamma[i];
            dgamma[i] += static_cast<double>(gr[i]) * xhat[i];
            dbeta[i] += gr[i];
            sum_dxhat += dxhat[i];
            sum_dxhat_xhat += dxhat[i] * xhat[i];
        }
        auto out = g.input.row(r);
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = static_cast<T>(rstd * (dxhat[i] - inv_n * sum_dxhat - xhat[i] * inv_n * sum_dxhat_xhat));
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        g.gamma[i] = static_cast<T>(dgamma[i]);
        g.beta[i] = static_cast<T>(dbeta[i]);
    }
    return g;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    using A = acc_t<T>;
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        auto yr = out.row(r);
        const A mx = *std::max_element(xr.begin(), xr.end());
        A sum = 0;
        for (std::size_t i = 0; i < xr.size(); ++i) sum += std::exp(static_cast<A>(xr[i]) - mx);
        for (std::size_t i = 0; i < xr.size(); ++i) {
            yr[i] = static_cast<T>(std::exp(static_cast<A>(xr[i]) - mx) / sum);
        }
    }
    return out;
}

template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy) {
    check_same_shape(y, dy, "softmax_rows_backward");
    Tensor<T> dx(y.shape());
    for (std::size_t r = 0; r < y.rows(); ++r) {
        auto yr = y.row(r);
        auto gr = dy.row(r);
        double dot = 0.0;
        for (std::size_t i = 0; i < yr.size(); ++i) dot += static_cast<double>(yr[i]) * gr[i];
        auto out = dx.row(r);
        for (std::size_t i = 0; i < yr.size(); ++i) out[i] = static_cast<T>(yr[i] * (gr[i] - dot));
    }
    return dx;
}

namespace {

template <typename A>
A gelu_impl(A x) {
    return A(0.5) * x * std::erfc(-x / std::numbers::sqrt2_v<A>);
}

}  // namespace

double gelu_scalar(double x) {
    return gelu_impl(x);
}

double gelu_derivative(double x) {
    const double cdf = 0.5 * std::erfc(-x / std::numbers::sqrt2);
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = static_cast<T>(gelu_impl(static_cast<acc_t<T>>(x[i])));
    return out;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
    check_same_shape(x, dy, "gelu_backward");
    Tensor<T> dx(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) dx[i] = static_cast<T>(dy[i] * gelu_derivative(x[i]));
    return dx;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> out = a;
    add_inplace(out, b);
    return out;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
}

template <typename T>
double max_abs(const Tensor<T>& t) {
    double m = 0.0;
    for (auto v : t.data()) m = std::max(m, std::abs(static_cast<double>(v)));
    return m;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return m;
}

#define CONSOLIDATOR_INSTANTIATE(T)                                                                  \
    template class Tensor<T>;                                                                        \
    template Tensor<T> affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> linear_input_grad(const Tensor<T>&, const Tensor<T>&);                        \
    template void accumulate_weight_grad(Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
    template void accumulate_bias_grad(Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);     \
    template LayerNormGrads<T> layer_norm_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                                   double);                                          \
    template Tensor<T> softmax_rows(const Tensor<T>&);                                               \
    template Tensor<T> softmax_rows_backward(const Tensor<T>&, const Tensor<T>&);                    \
    template Tensor<T> gelu(const Tensor<T>&);                                                       \
    template Tensor<T> gelu_backward(const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
    template void add_inplace(Tensor<T>&, const Tensor<T>&);                                         \
    template double max_abs(const Tensor<T>&);                                                       \
    template double max_abs_diff(const Tensor<T>&, const Tensor<T>&);

CONSOLIDATOR_INSTANTIATE(float)
CONSOLIDATOR_INSTANTIATE(double)
CONSOLIDATOR_INSTANTIATE(long double)

#undef CONSOLIDATOR_INSTANTIATE

}  // namespace consolidator
