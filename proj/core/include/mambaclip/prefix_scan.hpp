#pragma once

#include <span>
#include <vector>

namespace mambaclip {

/// In-place inclusive scan under an associative (not necessarily
/// commutative) operator `op(earlier, later)`.
///
/// Work-efficient tree form: adjacent pairs are combined, the half-length
/// sequence is scanned recursively, and the even positions are fixed up. Every
/// loop body is independent across its index, so each level is data-parallel;
/// depth is O(log n), work O(n).
template <class E, class Op>
void inclusive_scan_tree(std::span<E> xs, Op op) {
  const std::size_t n = xs.size();
  if (n <= 1) return;
  const std::size_t half = n / 2;
  std::vector<E> pairs(half);
  for (std::size_t i = 0; i < half; ++i) pairs[i] = op(xs[2 * i], xs[2 * i + 1]);
  inclusive_scan_tree(std::span<E>(pairs), op);
  // pairs[i] now holds the prefix through element 2i+1.
  for (std::size_t i = 1; 2 * i < n; ++i) xs[2 * i] = op(pairs[i - 1], xs[2 * i]);
  for (std::size_t i = 0; i < half; ++i) xs[2 * i + 1] = pairs[i];
}

/// Element of a first-order linear recurrence h_t = a_t·h_{t-1} + b_t.
template <class T>
struct AffineStep {
  T a;
  T b;
};

/// Composition of two recurrence steps, `earlier` applied first:
/// (a₁, b₁) then (a₂, b₂)  ->  (a₁a₂, a₂b₁ + b₂).
template <class T>
AffineStep<T> compose(const AffineStep<T>& earlier, const AffineStep<T>& later) {
  return {earlier.a * later.a, later.a * earlier.b + later.b};
}

}  // namespace mambaclip
