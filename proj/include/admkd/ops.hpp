#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include "admkd/tensor.hpp"

namespace admkd {

template <typename S>
using ScalarArg = std::type_identity_t<S>;

/// Shape obtained by aligning trailing axes and expanding size-1 extents.
Shape broadcast_shape(const Shape& a, const Shape& b);

// Elementwise arithmetic with broadcasting.
template <typename S> TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b);
template <typename S> TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b);
template <typename S> TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b);
template <typename S> TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b);

// Scalar arithmetic.
template <typename S> TensorT<S> add_scalar(const TensorT<S>& x, ScalarArg<S> c);
template <typename S> TensorT<S> mul_scalar(const TensorT<S>& x, ScalarArg<S> c);
template <typename S> TensorT<S> neg(const TensorT<S>& x);

// Unary maps.
template <typename S> TensorT<S> relu(const TensorT<S>& x);
template <typename S> TensorT<S> exp(const TensorT<S>& x);
template <typename S> TensorT<S> log(const TensorT<S>& x);
template <typename S> TensorT<S> sqrt(const TensorT<S>& x);
template <typename S> TensorT<S> square(const TensorT<S>& x);

// Reductions. Axes are listed explicitly; an empty list reduces everything.
template <typename S> TensorT<S> sum(const TensorT<S>& x, const std::vector<std::size_t>& axes = {}, bool keep_dims = false);
template <typename S> TensorT<S> mean(const TensorT<S>& x, const std::vector<std::size_t>& axes = {}, bool keep_dims = false);

// Layout.
template <typename S> TensorT<S> reshape(const TensorT<S>& x, Shape shape);
template <typename S> TensorT<S> concat(std::span<const TensorT<S>> parts, std::size_t axis);
template <typename S> TensorT<S> transpose(const TensorT<S>& x);

// Linear algebra and convolution.
template <typename S> TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b);
/// x·Wᵀ (+ bias) for x[B×in], W[out×in], bias[out].
template <typename S> TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& weight, const std::optional<TensorT<S>>& bias);
/// Zero-padded cross-correlation, lowered to patch gather plus one GEMM.
template <typename S> TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& kernel, std::size_t stride = 1, std::size_t pad = 0);
/// Global average pooling [B×C×H×W] -> [B×C].
template <typename S> TensorT<S> gap(const TensorT<S>& x);

/// Train-mode batch normalisation over (B, H, W) per channel. The batch
/// mean and biased variance are written to the optional outputs.
template <typename S>
TensorT<S> batch_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta, ScalarArg<S> eps,
                      std::vector<S>* batch_mean = nullptr, std::vector<S>* batch_var = nullptr);

// Temperature softmax along the last axis.
template <typename S> TensorT<S> softmax(const TensorT<S>& z, ScalarArg<S> tau = S(1));
template <typename S> TensorT<S> log_softmax(const TensorT<S>& z, ScalarArg<S> tau = S(1));

template <typename S> TensorT<S> detach(const TensorT<S>& x) { return x.detach(); }

template <typename S> TensorT<S> operator+(const TensorT<S>& a, const TensorT<S>& b) { return add(a, b); }
template <typename S> TensorT<S> operator-(const TensorT<S>& a, const TensorT<S>& b) { return sub(a, b); }
template <typename S> TensorT<S> operator*(const TensorT<S>& a, const TensorT<S>& b) { return mul(a, b); }
template <typename S> TensorT<S> operator/(const TensorT<S>& a, const TensorT<S>& b) { return div(a, b); }
template <typename S> TensorT<S> operator-(const TensorT<S>& x) { return neg(x); }
template <typename S> TensorT<S> operator+(const TensorT<S>& x, ScalarArg<S> c) { return add_scalar(x, c); }
template <typename S> TensorT<S> operator+(ScalarArg<S> c, const TensorT<S>& x) { return add_scalar(x, c); }
template <typename S> TensorT<S> operator-(const TensorT<S>& x, ScalarArg<S> c) { return add_scalar(x, -c); }
template <typename S> TensorT<S> operator-(ScalarArg<S> c, const TensorT<S>& x) { return add_scalar(neg(x), c); }
template <typename S> TensorT<S> operator*(const TensorT<S>& x, ScalarArg<S> c) { return mul_scalar(x, c); }
template <typename S> TensorT<S> operator*(ScalarArg<S> c, const TensorT<S>& x) { return mul_scalar(x, c); }
template <typename S> TensorT<S> operator/(const TensorT<S>& x, ScalarArg<S> c) { return mul_scalar(x, S(1) / c); }

}  // namespace admkd
