#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mambaclip/tensor.hpp"

// Differentiable primitives. Each one records itself on the tape of its
// inputs (if any) and saves only what its backward rule reads.
//
// Broadcasting: binary elementwise ops accept equal shapes, a rank-1 operand
// matching the other operand's trailing dimension, or a rank-0 scalar.
// Anything else is a ShapeError. All ops are explicitly instantiated for
// float, double and Dual.

namespace mambaclip {

/// a: [..., M, K], b: [K, N] -> [..., M, N].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

/// x·c for a constant c (no gradient to c).
template <class T>
Tensor<T> scale(const Tensor<T>& x, double c);
/// x + c for a constant c.
template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, double c);

template <class T>
Tensor<T> exp(const Tensor<T>& x);
template <class T>
Tensor<T> log(const Tensor<T>& x);
/// log(1 + e^x), overflow-safe.
template <class T>
Tensor<T> softplus(const Tensor<T>& x);
/// x·sigmoid(x).
template <class T>
Tensor<T> silu(const Tensor<T>& x);
template <class T>
Tensor<T> tanh(const Tensor<T>& x);
/// Elementwise x^p for a constant exponent.
template <class T>
Tensor<T> power(const Tensor<T>& x, double p);
/// min(x, c); gradient is zero where the clamp is active. NaN passes through.
template <class T>
Tensor<T> clamp_max(const Tensor<T>& x, double c);

/// Sum of all elements -> rank 0.
template <class T>
Tensor<T> sum(const Tensor<T>& x);
/// Sum over one axis; the axis is removed.
template <class T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis);
template <class T>
Tensor<T> mean(const Tensor<T>& x);
template <class T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis);
/// Max over one axis; the axis is removed. Gradient goes to the lowest-index
/// maximizer only.
template <class T>
Tensor<T> max(const Tensor<T>& x, std::size_t axis);

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// Axis permutation: out.shape[i] = x.shape[perm[i]].
template <class T>
Tensor<T> transpose(const Tensor<T>& x, std::span<const std::size_t> perm);
/// Swaps the last two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& x);
template <class T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis);
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);

/// Softmax over the last axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& x);
/// Normalizes over the last axis, then applies gamma/beta (both [D]).
template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5);
/// table: [V, D]; ids laid out as `prefix` -> prefix + [D].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::size_t> ids, const Shape& prefix);
/// Causal depthwise convolution. x: [B, L, C], w: [C, K], bias: [C].
/// y[b,t,c] = bias[c] + sum_k w[c,k] · x[b, t-(K-1)+k, c], zero left padding.
template <class T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);
/// Rows of the last axis scaled to unit L2 norm.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, double eps = 1e-12);
/// Mean cross-entropy of logits [N, K] against class indices.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets);

/// Index select along `axis`: out[..., i, ...] = x[..., index[i], ...].
template <class T>
Tensor<T> gather(const Tensor<T>& x, std::size_t axis, std::span<const std::size_t> index);
/// x: [B, L, D], one position per batch row -> [B, D].
template <class T>
Tensor<T> select_positions(const Tensor<T>& x, std::span<const std::size_t> positions);
/// [B, H, W, C] -> [B, H/f, W/f, f·f·C]; each output vector is the f×f block
/// in (row, col, channel) order.
template <class T>
Tensor<T> space_to_depth(const Tensor<T>& x, std::size_t factor);

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, -1.0);
}

}  // namespace mambaclip
