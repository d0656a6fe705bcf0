#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "consolidator/errors.hpp"

namespace consolidator {

using Shape = std::vector<std::size_t>;

/// Accumulator for reductions: double, or T when T is wider.
template <typename T>
using acc_t = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array. The trailing axis is the channel axis for every
/// layer op; leading axes are flattened into rows.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0));
    Tensor(Shape shape, std::vector<T> data);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    /// Size of the trailing (channel) axis.
    std::size_t channels() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
    /// Number of trailing-axis rows.
    std::size_t rows() const noexcept { return channels() == 0 ? 0 : numel() / channels(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& values() noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * channels(), channels()); }
    std::span<const T> row(std::size_t r) const {
        return std::span<const T>(data_).subspan(r * channels(), channels());
    }

    /// Same data, new shape of equal element count.
    Tensor reshaped(Shape shape) const;

    /// Shape with the trailing extent replaced.
    Shape shape_with_channels(std::size_t channels) const;

    void fill(T value);
    bool all_finite() const;

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
    return Tensor<T>(t.shape());
}

template <typename Dst, typename Src>
Tensor<Dst> tensor_cast(const Tensor<Src>& t) {
    std::vector<Dst> out(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) out[i] = static_cast<Dst>(t[i]);
    return Tensor<Dst>(t.shape(), std::move(out));
}

/// out[..., e] = sum_d W[e,d] x[..., d] + b[e]; W is E x D, b has E entries.
template <typename T>
Tensor<T> affine(const Tensor<T>& weight, const Tensor<T>& bias, const Tensor<T>& x);

/// Same map without a bias term.
template <typename T>
Tensor<T> linear(const Tensor<T>& weight, const Tensor<T>& x);

/// dx = dy W for a weight of shape E x D.
template <typename T>
Tensor<T> linear_input_grad(const Tensor<T>& weight, const Tensor<T>& dy);

/// Accumulates dW += dy^T x into grad_weight.
template <typename T>
void accumulate_weight_grad(Tensor<T>& grad_weight, const Tensor<T>& x, const Tensor<T>& dy);

/// Accumulates db += column sums of dy.
template <typename T>
void accumulate_bias_grad(Tensor<T>& grad_bias, const Tensor<T>& dy);

inline constexpr double kLayerNormEps = 1e-6;

/// Per trailing slice, gamma * (x - mean) / sqrt(var + eps) + beta with the biased variance.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = kLayerNormEps);

template <typename T>
struct LayerNormGrads {
    Tensor<T> input;
    Tensor<T> gamma;
    Tensor<T> beta;
};

template <typename T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& dy,
                                      double eps = kLayerNormEps);

/// Row-wise softmax over the trailing axis, max-subtracted.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

/// Given y = softmax_rows(x) and dL/dy, returns dL/dx.
template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy);

/// Exact GELU x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

double gelu_scalar(double x);
double gelu_derivative(double x);

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b);

template <typename T>
double max_abs(const Tensor<T>& t);

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace consolidator
