// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations. Every function records its result on the tape of
// its first operand; operands must share one tape.

#pragma once

#include <span>

#include "dcan/autodiff.hpp"

namespace dcan {

/// Floor applied to the argument of `log`.
inline constexpr double kLogFloor = 1e-12;

/// Output shape of a trailing-aligned broadcast. Throws ShapeError naming both
/// shapes when an axis differs and neither extent is 1.
Shape broadcast_shape(const Shape& a, const Shape& b);

enum class Binary { add, sub, mul, div };
enum class Unary { relu, sigmoid, log, exp };

template <typename T>
Var<T> binary(Binary kind, const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> unary(Unary kind, const Var<T>& a);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) { return binary(Binary::add, a, b); }
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) { return binary(Binary::sub, a, b); }
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) { return binary(Binary::mul, a, b); }
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) { return binary(Binary::div, a, b); }

/// ReLU with zero gradient at exactly 0.
template <typename T>
Var<T> relu(const Var<T>& a) { return unary(Unary::relu, a); }
template <typename T>
Var<T> sigmoid(const Var<T>& a) { return unary(Unary::sigmoid, a); }
/// Natural log of max(a, kLogFloor).
template <typename T>
Var<T> log(const Var<T>& a) { return unary(Unary::log, a); }
template <typename T>
Var<T> exp(const Var<T>& a) { return unary(Unary::exp, a); }

template <typename T>
Var<T> scale(const Var<T>& a, T factor);
/// max(a, floor) elementwise; gradient passes only where a > floor.
template <typename T>
Var<T> clamp_min(const Var<T>& a, T floor);

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> transpose(const Var<T>& a);

/// Cross-correlation of an NCHW input with an [C_out, C_in, kh, kw] kernel.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, std::size_t stride, std::size_t padding);

/// [N,C,H,W] -> [N,C] spatial mean.
template <typename T>
Var<T> global_avg_pool(const Var<T>& input);

/// Row-wise softmax of an [N,K] tensor.
template <typename T>
Var<T> softmax(const Var<T>& input);

/// Sum of all elements as a rank-0 scalar.
template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> mean(const Var<T>& a);
/// [N,K] -> [N,1].
template <typename T>
Var<T> row_sum(const Var<T>& a);

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape);

/// Selects rows of an [N,D] tensor (rows may repeat).
template <typename T>
Var<T> gather_rows(const Var<T>& a, std::span<const std::size_t> rows);

/// [n,D] x [m,D] -> [n,m] squared euclidean distances, computed from explicit
/// differences.
template <typename T>
Var<T> pairwise_sq_dist(const Var<T>& a, const Var<T>& b);

/// Throws unless every row of an [N,K] tensor is a probability vector within
/// `tolerance`.
template <typename T>
void require_simplex(const Tensor<T>& probs, double tolerance, const char* what);

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <typename T>
Var<T> operator*(double factor, const Var<T>& a) { return scale(a, static_cast<T>(factor)); }

}  // namespace dcan
