#include "mambaclip/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <type_traits>

#include <Eigen/Core>

namespace mambaclip {
namespace {

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using CMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <class T>
T s_exp(const T& x) {
  using std::exp;
  return exp(x);
}
template <class T>
T s_log(const T& x) {
  using std::log;
  return log(x);
}
template <class T>
T s_log1p(const T& x) {
  using std::log1p;
  return log1p(x);
}
template <class T>
T s_tanh(const T& x) {
  using std::tanh;
  return tanh(x);
}
template <class T>
T s_sqrt(const T& x) {
  using std::sqrt;
  return sqrt(x);
}
template <class T>
T s_pow(const T& x, double p) {
  using std::pow;
  return pow(x, static_cast<T>(p));
}
template <>
Dual s_pow<Dual>(const Dual& x, double p) {
  return pow(x, p);
}

template <class T>
T sigmoid(const T& x) {
  if (value_of(x) >= 0.0) return T(1) / (T(1) + s_exp(-x));
  const T e = s_exp(x);
  return e / (T(1) + e);
}

template <class T>
T softplus_scalar(const T& x) {
  if (value_of(x) > 0.0) return x + s_log1p(s_exp(-x));
  return s_log1p(s_exp(x));
}

[[noreturn]] void shape_fail(std::string_view op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

// Splits a shape around `axis` into (outer, n, inner) extents.
struct AxisView {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis, std::string_view op) {
  if (axis >= s.size()) {
    shape_fail(op, "axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out = s;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

enum class Bcast { same, rhs_vec, lhs_vec, rhs_scalar, lhs_scalar };

struct BcastPlan {
  Bcast mode;
  Shape out_shape;
  std::size_t inner;  // trailing length for *_vec modes
};

BcastPlan plan_broadcast(const Shape& a, const Shape& b, std::string_view op) {
  if (a == b) return {Bcast::same, a, 1};
  if (b.empty()) return {Bcast::rhs_scalar, a, 1};
  if (a.empty()) return {Bcast::lhs_scalar, b, 1};
  if (b.size() == 1 && a.back() == b[0]) return {Bcast::rhs_vec, a, b[0]};
  if (a.size() == 1 && b.back() == a[0]) return {Bcast::lhs_vec, b, a[0]};
  shape_fail(op, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_pair(const BcastPlan& p, std::size_t n, F&& f) {
  switch (p.mode) {
    case Bcast::same:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i);
      break;
    case Bcast::rhs_scalar:
      for (std::size_t i = 0; i < n; ++i) f(i, i, std::size_t{0});
      break;
    case Bcast::lhs_scalar:
      for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0}, i);
      break;
    case Bcast::rhs_vec:
      for (std::size_t r = 0; r < n; r += p.inner)
        for (std::size_t j = 0; j < p.inner; ++j) f(r + j, r + j, j);
      break;
    case Bcast::lhs_vec:
      for (std::size_t r = 0; r < n; r += p.inner)
        for (std::size_t j = 0; j < p.inner; ++j) f(r + j, j, r + j);
      break;
  }
}

// Elementwise binary op. `fwd(a, b)` computes the value; `da(g, a, b, y)` and
// `db(g, a, b, y)` give the gradient contributions.
template <class T, class Fwd, class DA, class DB>
Tensor<T> binary(Primitive op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db) {
  const BcastPlan plan = plan_broadcast(a.shape(), b.shape(), primitive_name(op));
  const std::size_t n = shape_numel(plan.out_shape);
  std::vector<T> out(n);
  {
    const auto av = a.data();
    const auto bv = b.data();
    for_each_pair(plan, n, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(av[ia], bv[ib]); });
  }
  Tensor<T> y(plan.out_shape, std::move(out));
  return record_op<T>(op, {&a, &b}, y, [a, b, y, plan, n, da, db](std::span<const T> g, GradSink<T>& sink) {
    const auto av = a.data();
    const auto bv = b.data();
    const auto yv = y.data();
    if (auto ga = sink(0); !ga.empty()) {
      for_each_pair(plan, n, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        ga[ia] += da(g[i], av[ia], bv[ib], yv[i]);
      });
    }
    if (auto gb = sink(1); !gb.empty()) {
      for_each_pair(plan, n, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        gb[ib] += db(g[i], av[ia], bv[ib], yv[i]);
      });
    }
  });
}

// Elementwise unary op whose derivative is expressed through (x, y).
template <class T, class Fwd, class Deriv>
Tensor<T> unary(Primitive op, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  Tensor<T> y(x.shape(), std::move(out));
  return record_op<T>(op, {&x}, y, [x, y, deriv](std::span<const T> g, GradSink<T>& sink) {
    auto gx = sink(0);
    if (gx.empty()) return;
    const auto xv = x.data();
    const auto yv = y.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------- matmul

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != 2) {
    shape_fail("matmul", "needs a of rank >= 2 and b of rank 2, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
  }
  const std::size_t K = a.shape().back();
  if (b.dim(0) != K) {
    shape_fail("matmul", "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                             " (" + std::to_string(K) + " vs " + std::to_string(b.dim(0)) + ")");
  }
  const std::size_t N = b.dim(1);
  const std::size_t R = a.numel() / K;
  Shape out_shape = a.shape();
  out_shape.back() = N;
  std::vector<T> out(R * N, T(0));
  if constexpr (std::is_floating_point_v<T>) {
    MatMap<T>(out.data(), R, N).noalias() = CMatMap<T>(a.data().data(), R, K) * CMatMap<T>(b.data().data(), K, N);
  } else {
    const T* ap = a.data().data();
    const T* bp = b.data().data();
    for (std::size_t r = 0; r < R; ++r) {
      T* orow = out.data() + r * N;
      for (std::size_t k = 0; k < K; ++k) {
        const T av = ap[r * K + k];
        const T* brow = bp + k * N;
        for (std::size_t n = 0; n < N; ++n) orow[n] += av * brow[n];
      }
    }
  }
  return record_op<T>(Primitive::matmul, {&a, &b}, Tensor<T>(out_shape, std::move(out)),
                      [a, b, R, K, N](std::span<const T> g, GradSink<T>& sink) {
                        const T* ap = a.data().data();
                        const T* bp = b.data().data();
                        if constexpr (std::is_floating_point_v<T>) {
                          const CMatMap<T> gm(g.data(), R, N);
                          if (auto ga = sink(0); !ga.empty()) {
                            MatMap<T>(ga.data(), R, K).noalias() += gm * CMatMap<T>(bp, K, N).transpose();
                          }
                          if (auto gb = sink(1); !gb.empty()) {
                            MatMap<T>(gb.data(), K, N).noalias() += CMatMap<T>(ap, R, K).transpose() * gm;
                          }
                          return;
                        }
                        if (auto ga = sink(0); !ga.empty()) {
                          for (std::size_t r = 0; r < R; ++r) {
                            const T* grow = g.data() + r * N;
                            for (std::size_t k = 0; k < K; ++k) {
                              const T* brow = bp + k * N;
                              T acc(0);
                              for (std::size_t n = 0; n < N; ++n) acc += grow[n] * brow[n];
                              ga[r * K + k] += acc;
                            }
                          }
                        }
                        if (auto gb = sink(1); !gb.empty()) {
                          for (std::size_t r = 0; r < R; ++r) {
                            const T* grow = g.data() + r * N;
                            for (std::size_t k = 0; k < K; ++k) {
                              const T av = ap[r * K + k];
                              T* gbrow = gb.data() + k * N;
                              for (std::size_t n = 0; n < N; ++n) gbrow[n] += av * grow[n];
                            }
                          }
                        }
                      });
}

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      Primitive::add, a, b, [](const T& x, const T& y) { return x + y; },
      [](const T& g, const T&, const T&, const T&) { return g; },
      [](const T& g, const T&, const T&, const T&) { return g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      Primitive::sub, a, b, [](const T& x, const T& y) { return x - y; },
      [](const T& g, const T&, const T&, const T&) { return g; },
      [](const T& g, const T&, const T&, const T&) { return -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      Primitive::mul, a, b, [](const T& x, const T& y) { return x * y; },
      [](const T& g, const T&, const T& y, const T&) { return g * y; },
      [](const T& g, const T& x, const T&, const T&) { return g * x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      Primitive::div, a, b, [](const T& x, const T& y) { return x / y; },
      [](const T& g, const T&, const T& y, const T&) { return g / y; },
      [](const T& g, const T&, const T& y, const T& out) { return -g * out / y; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, double c) {
  const T k = static_cast<T>(c);
  return unary<T>(
      Primitive::mul, x, [k](const T& v) { return v * k; }, [k](const T&, const T&) { return k; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, double c) {
  const T k = static_cast<T>(c);
  return unary<T>(
      Primitive::add, x, [k](const T& v) { return v + k; }, [](const T&, const T&) { return T(1); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary<T>(
      Primitive::exp, x, [](const T& v) { return s_exp(v); }, [](const T&, const T& y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return unary<T>(
      Primitive::log, x, [](const T& v) { return s_log(v); }, [](const T& v, const T&) { return T(1) / v; });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary<T>(
      Primitive::softplus, x, [](const T& v) { return softplus_scalar(v); },
      [](const T& v, const T&) { return sigmoid(v); });
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary<T>(
      Primitive::silu, x, [](const T& v) { return v * sigmoid(v); },
      [](const T& v, const T&) {
        const T s = sigmoid(v);
        return s + v * s * (T(1) - s);
      });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary<T>(
      Primitive::tanh, x, [](const T& v) { return s_tanh(v); }, [](const T&, const T& y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> power(const Tensor<T>& x, double p) {
  return unary<T>(
      Primitive::power, x, [p](const T& v) { return s_pow(v, p); },
      [p](const T& v, const T&) { return p == 0.0 ? T(0) : static_cast<T>(p) * s_pow(v, p - 1.0); });
}

template <class T>
Tensor<T> clamp_max(const Tensor<T>& x, double c) {
  const T k = static_cast<T>(c);
  return unary<T>(
      Primitive::clamp_max, x, [k, c](const T& v) { return value_of(v) > c ? k : v; },
      [c](const T& v, const T&) { return value_of(v) > c ? T(0) : T(1); });
}

// ---------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc(0);
  for (const T& v : x.data()) acc += v;
  return record_op<T>(Primitive::sum, {&x}, Tensor<T>::scalar(acc), [](std::span<const T> g, GradSink<T>& sink) {
    auto gx = sink(0);
    for (T& v : gx) v += g[0];
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
  const AxisView v = axis_view(x.shape(), axis, "sum");
  std::vector<T> out(v.outer * v.inner, T(0));
  const auto xv = x.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t k = 0; k < v.n; ++k)
      for (std::size_t i = 0; i < v.inner; ++i) out[o * v.inner + i] += xv[(o * v.n + k) * v.inner + i];
  return record_op<T>(Primitive::sum, {&x}, Tensor<T>(drop_axis(x.shape(), axis), std::move(out)),
                      [v](std::span<const T> g, GradSink<T>& sink) {
                        auto gx = sink(0);
                        if (gx.empty()) return;
                        for (std::size_t o = 0; o < v.outer; ++o)
                          for (std::size_t k = 0; k < v.n; ++k)
                            for (std::size_t i = 0; i < v.inner; ++i)
                              gx[(o * v.n + k) * v.inner + i] += g[o * v.inner + i];
                      });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  const std::size_t n = x.numel();
  T acc(0);
  for (const T& v : x.data()) acc += v;
  acc /= static_cast<T>(static_cast<double>(n));
  return record_op<T>(Primitive::mean, {&x}, Tensor<T>::scalar(acc), [n](std::span<const T> g, GradSink<T>& sink) {
    auto gx = sink(0);
    const T share = g[0] / static_cast<T>(static_cast<double>(n));
    for (T& v : gx) v += share;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
  const AxisView v = axis_view(x.shape(), axis, "mean");
  const T inv = T(1) / static_cast<T>(static_cast<double>(v.n));
  std::vector<T> out(v.outer * v.inner, T(0));
  const auto xv = x.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t k = 0; k < v.n; ++k)
      for (std::size_t i = 0; i < v.inner; ++i) out[o * v.inner + i] += xv[(o * v.n + k) * v.inner + i];
  for (T& o : out) o *= inv;
  return record_op<T>(Primitive::mean, {&x}, Tensor<T>(drop_axis(x.shape(), axis), std::move(out)),
                      [v, inv](std::span<const T> g, GradSink<T>& sink) {
                        auto gx = sink(0);
                        if (gx.empty()) return;
                        for (std::size_t o = 0; o < v.outer; ++o)
                          for (std::size_t k = 0; k < v.n; ++k)
                            for (std::size_t i = 0; i < v.inner; ++i)
                              gx[(o * v.n + k) * v.inner + i] += g[o * v.inner + i] * inv;
                      });
}

template <class T>
Tensor<T> max(const Tensor<T>& x, std::size_t axis) {
  const AxisView v = axis_view(x.shape(), axis, "max");
  std::vector<T> out(v.outer * v.inner);
  std::vector<std::size_t> arg(v.outer * v.inner, 0);
  const auto xv = x.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < v.n; ++k) {
        if (value_of(xv[(o * v.n + k) * v.inner + i]) > value_of(xv[(o * v.n + best) * v.inner + i])) best = k;
      }
      arg[o * v.inner + i] = best;
      out[o * v.inner + i] = xv[(o * v.n + best) * v.inner + i];
    }
  }
  return record_op<T>(Primitive::max, {&x}, Tensor<T>(drop_axis(x.shape(), axis), std::move(out)),
                      [v, arg = std::move(arg)](std::span<const T> g, GradSink<T>& sink) {
                        auto gx = sink(0);
                        if (gx.empty()) return;
                        for (std::size_t o = 0; o < v.outer; ++o)
                          for (std::size_t i = 0; i < v.inner; ++i)
                            gx[(o * v.n + arg[o * v.inner + i]) * v.inner + i] += g[o * v.inner + i];
                      });
}

// ---------------------------------------------------------------- layout

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    shape_fail("reshape", "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor<T> y(std::move(shape), x.to_vector());
  return record_op<T>(Primitive::reshape, {&x}, y, [](std::span<const T> g, GradSink<T>& sink) {
    auto gx = sink(0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
}

namespace {

// Source offset (into x) of every output element of a permutation.
std::vector<std::size_t> permutation_offsets(const Shape& in, std::span<const std::size_t> perm) {
  const std::size_t r = in.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = in[perm[i]];
  const std::size_t n = shape_numel(in);
  std::vector<std::size_t> offsets(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_stride[perm[i]];
    offsets[o] = src;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out[i]) break;
      idx[i] = 0;
    }
  }
  return offsets;
}

}  // namespace

template <class T>
Tensor<T> transpose(const Tensor<T>& x, std::span<const std::size_t> perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) {
    shape_fail("transpose", "permutation of length " + std::to_string(perm.size()) + " for shape " +
                                shape_str(x.shape()));
  }
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) shape_fail("transpose", "invalid permutation for shape " + shape_str(x.shape()));
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.shape()[perm[i]];
  auto offsets = std::make_shared<const std::vector<std::size_t>>(permutation_offsets(x.shape(), perm));
  const auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xv[(*offsets)[o]];
  return record_op<T>(Primitive::transpose, {&x}, Tensor<T>(out_shape, std::move(out)),
                      [offsets](std::span<const T> g, GradSink<T>& sink) {
                        auto gx = sink(0);
                        if (gx.empty()) return;
                        for (std::size_t o = 0; o < g.size(); ++o) gx[(*offsets)[o]] += g[o];
                      });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) shape_fail("transpose", "needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return transpose(x, std::span<const std::size_t>(perm));
}

template <class T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) shape_fail("concat", "axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
  std::vector<std::size_t> lengths;
  std::size_t total = 0;
  for (const Tensor<T>& p : parts) {
    Shape a = p.shape(), b = s0;
    if (a.size() != b.size()) shape_fail("concat", "rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    a[axis] = b[axis] = 0;
    if (a != b) shape_fail("concat", "shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
    lengths.push_back(p.shape()[axis]);
    total += p.shape()[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  const AxisView v = axis_view(out_shape, axis, "concat");
  std::vector<T> out(shape_numel(out_shape));
  std::size_t start = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto pv = parts[p].data();
    const std::size_t len = lengths[p];
    for (std::size_t o = 0; o < v.outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * len * v.inner), len * v.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * v.n + start) * v.inner));
    start += len;
  }
  std::vector<const Tensor<T>*> inputs;
  for (const Tensor<T>& p : parts) inputs.push_back(&p);
  return record_op<T>(Primitive::concat, std::span<const Tensor<T>* const>(inputs),
                      Tensor<T>(out_shape, std::move(out)),
                      [v, lengths](std::span<const T> g, GradSink<T>& sink) {
                        std::size_t start = 0;
                        for (std::size_t p = 0; p < lengths.size(); ++p) {
                          const std::size_t len = lengths[p];
                          if (auto gp = sink(p); !gp.empty()) {
                            for (std::size_t o = 0; o < v.outer; ++o)
                              for (std::size_t j = 0; j < len * v.inner; ++j)
                                gp[o * len * v.inner + j] += g[(o * v.n + start) * v.inner + j];
                          }
                          start += len;
                        }
                      });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisView v = axis_view(x.shape(), axis, "slice");
  if (length == 0 || start + length > v.n) {
    shape_fail("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                            ") out of bounds for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<T> out(v.outer * length * v.inner);
  const auto xv = x.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * v.n + start) * v.inner), length * v.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * v.inner));
  return record_op<T>(Primitive::slice, {&x}, Tensor<T>(out_shape, std::move(out)),
                      [v, start, length](std::span<const T> g, GradSink<T>& sink) {
                        auto gx = sink(0);
                        if (gx.empty()) return;
                        for (std::size_t o = 0; o < v.outer; ++o)
                          for (std::size_t j = 0; j < length * v.inner; ++j)
                            gx[(o * v.n + start) * v.inner + j] += g[o * length * v.inner + j];
                      });
}

// ---------------------------------------------------------------- normalization

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() == 0) shape_fail("softmax", "needs rank >= 1");
  const std::size_t D = x.shape().back();
  const std::size_t rows = x.numel() / D;
  const auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * D;
    T* yr = out.data() + r * D;
    T m = xr[0];
    for (std::size_t j = 1; j < D; ++j)
      if (value_of(xr[j]) > value_of(m)) m = xr[j];
    T z(0);
    for (std::size_t j = 0; j < D; ++j) {
      yr[j] = s_exp(xr[j] - m);
      z += yr[j];
    }
    for (std::size_t j = 0; j < D; ++j) yr[j] /= z;
  }
  Tensor<T> y(x.shape(), std::move(out));
  return record_op<T>(Primitive::softmax, {&x}, y, [y, D, rows](std::span<const T> g, GradSink<T>& sink) {
    auto gx = sink(0);
    if (gx.empty()) return;
    const auto yv = y.data();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot(0);
      for (std::size_t j = 0; j < D; ++j) dot += g[r * D + j] * yv[r * D + j];
      for (std::size_t j = 0; j < D; ++j) gx[r * D + j] += yv[r * D + j] * (g[r * D + j] - dot);
    }
  });
}

template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  if (x.rank() == 0) shape_fail("layernorm", "needs rank >= 1");
  const std::size_t D = x.shape().back();
  if (gamma.shape() != Shape{D} || beta.shape() != Shape{D}) {
    shape_fail("layernorm", "gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                                " must be [" + std::to_string(D) + "] for input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / D;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<T> xhat(x.numel()), rstd(rows), out(x.numel());
  const T invD = T(1) / static_cast<T>(static_cast<double>(D));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * D;
    T mu(0);
    for (std::size_t j = 0; j < D; ++j) mu += xr[j];
    mu *= invD;
    T var(0);
    for (std::size_t j = 0; j < D; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var *= invD;
    rstd[r] = T(1) / s_sqrt(var + static_cast<T>(eps));
    for (std::size_t j = 0; j < D; ++j) {
      xhat[r * D + j] = (xr[j] - mu) * rstd[r];
      out[r * D + j] = xhat[r * D + j] * gv[j] + bv[j];
    }
  }
  auto saved_xhat = std::make_shared<const std::vector<T>>(std::move(xhat));
  auto saved_rstd = std::make_shared<const std::vector<T>>(std::move(rstd));
  return record_op<T>(Primitive::layernorm, {&x, &gamma, &beta}, Tensor<T>(x.shape(), std::move(out)),
                      [gamma, saved_xhat, saved_rstd, D, rows, invD](std::span<const T> g, GradSink<T>& sink) {
                        const auto& xh = *saved_xhat;
                        const auto gv = gamma.data();
                        if (auto gg = sink(1); !gg.empty())
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < D; ++j) gg[j] += g[r * D + j] * xh[r * D + j];
                        if (auto gb = sink(2); !gb.empty())
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < D; ++j) gb[j] += g[r * D + j];
                        auto gx = sink(0);
                        if (gx.empty()) return;
                        for (std::size_t r = 0; r < rows; ++r) {
                          T m1(0), m2(0);
                          for (std::size_t j = 0; j < D; ++j) {
                            const T d = g[r * D + j] * gv[j];
                            m1 += d;
                            m2 += d * xh[r * D + j];
                          }
                          m1 *= invD;
                          m2 *= invD;
                          for (std::size_t j = 0; j < D; ++j) {
                            const T d = g[r * D + j] * gv[j];
                            gx[r * D + j] += (*saved_rstd)[r] * (d - m1 - xh[r * D + j] * m2);
                          }
                        }
                      });
}

template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, double eps) {
  if (x.rank() == 0) shape_fail("l2_normalize", "needs rank >= 1");
  const std::size_t D = x.shape().back();
  const std::size_t rows = x.numel() / D;
  const auto xv = x.data();
  std::vector<T> out(x.numel()), inv_norm(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s(0);
    for (std::size_t j = 0; j < D; ++j) s += xv[r * D + j] * xv[r * D + j];
    inv_norm[r] = T(1) / s_sqrt(s + static_cast<T>(eps));
    for (std::size_t j = 0; j < D; ++j) out[r * D + j] = xv[r * D + j] * inv_norm[r];
  }
  Tensor<T> y(x.shape(), std::move(out));
  return record_op<T>(Primitive::l2_normalize, {&x}, y,
                      [y, inv = std::move(inv_norm), D, rows](std::span<const T> g, GradSink<T>& sink) {
                        auto gx = sink(0);
                        if (gx.empty()) return;
                        const auto yv = y.data();
                        for (std::size_t r = 0; r < rows; ++r) {
                          T dot(0);
                          for (std::size_t j = 0; j < D; ++j) dot += g[r * D + j] * yv[r * D + j];
                          for (std::size_t j = 0; j < D; ++j)
                            gx[r * D + j] += inv[r] * (g[r * D + j] - yv[r * D + j] * dot);
                        }
                      });
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  if (logits.rank() != 2) shape_fail("cross_entropy", "logits must be [N, K], got " + shape_str(logits.shape()));
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (targets.size() != N) {
    shape_fail("cross_entropy", std::to_string(targets.size()) + " targets for " + std::to_string(N) + " rows");
  }
  for (std::size_t t : targets)
    if (t >= K) shape_fail("cross_entropy", "target " + std::to_string(t) + " >= classes " + std::to_string(K));
  const auto lv = logits.data();
  std::vector<T> probs(N * K);
  T total(0);
  for (std::size_t r = 0; r < N; ++r) {
    const T* z = lv.data() + r * K;
    T m = z[0];
    for (std::size_t j = 1; j < K; ++j)
      if (value_of(z[j]) > value_of(m)) m = z[j];
    T s(0);
    for (std::size_t j = 0; j < K; ++j) {
      probs[r * K + j] = s_exp(z[j] - m);
      s += probs[r * K + j];
    }
    for (std::size_t j = 0; j < K; ++j) probs[r * K + j] /= s;
    total += m + s_log(s) - z[targets[r]];
  }
  const T invN = T(1) / static_cast<T>(static_cast<double>(N));
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return record_op<T>(Primitive::cross_entropy, {&logits}, Tensor<T>::scalar(total * invN),
                      [p = std::move(probs), tgt = std::move(tgt), N, K, invN](std::span<const T> g,
                                                                               GradSink<T>& sink) {
                        auto gl = sink(0);
                        if (gl.empty()) return;
                        const T s = g[0] * invN;
                        for (std::size_t r = 0; r < N; ++r) {
                          for (std::size_t j = 0; j < K; ++j) gl[r * K + j] += s * p[r * K + j];
                          gl[r * K + tgt[r]] -= s;
                        }
                      });
}

// ---------------------------------------------------------------- indexing

template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::size_t> ids, const Shape& prefix) {
  if (table.rank() != 2) shape_fail("embedding", "table must be [V, D], got " + shape_str(table.shape()));
  if (shape_numel(prefix) != ids.size()) {
    shape_fail("embedding", std::to_string(ids.size()) + " ids for prefix shape " + shape_str(prefix));
  }
  const std::size_t V = table.dim(0), D = table.dim(1);
  for (std::size_t id : ids)
    if (id >= V) shape_fail("embedding", "id " + std::to_string(id) + " >= vocabulary " + std::to_string(V));
  Shape out_shape = prefix;
  out_shape.push_back(D);
  std::vector<T> out(ids.size() * D);
  const auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * D), D, out.begin() + static_cast<std::ptrdiff_t>(i * D));
  std::vector<std::size_t> saved(ids.begin(), ids.end());
  return record_op<T>(Primitive::embedding, {&table}, Tensor<T>(out_shape, std::move(out)),
                      [saved = std::move(saved), D](std::span<const T> g, GradSink<T>& sink) {
                        auto gt = sink(0);
                        if (gt.empty()) return;
                        for (std::size_t i = 0; i < saved.size(); ++i)
                          for (std::size_t j = 0; j < D; ++j) gt[saved[i] * D + j] += g[i * D + j];
                      });
}

template <class T>
Tensor<T> gather(const Tensor<T>& x, std::size_t axis, std::span<const std::size_t> index) {
  const AxisView v = axis_view(x.shape(), axis, "gather");
  if (index.empty()) shape_fail("gather", "empty index");
  for (std::size_t i : index)
    if (i >= v.n) shape_fail("gather", "index " + std::to_string(i) + " out of range for axis of " + std::to_string(v.n));
  const std::size_t m = index.size();
  Shape out_shape = x.shape();
  out_shape[axis] = m;
  std::vector<T> out(v.outer * m * v.inner);
  const auto xv = x.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t k = 0; k < m; ++k)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * v.n + index[k]) * v.inner), v.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * m + k) * v.inner));
  std::vector<std::size_t> idx(index.begin(), index.end());
  return record_op<T>(Primitive::gather, {&x}, Tensor<T>(out_shape, std::move(out)),
                      [v, idx = std::move(idx)](std::span<const T> g, GradSink<T>& sink) {
                        auto gx = sink(0);
                        if (gx.empty()) return;
                        const std::size_t m = idx.size();
                        for (std::size_t o = 0; o < v.outer; ++o)
                          for (std::size_t k = 0; k < m; ++k)
                            for (std::size_t i = 0; i < v.inner; ++i)
                              gx[(o * v.n + idx[k]) * v.inner + i] += g[(o * m + k) * v.inner + i];
                      });
}

template <class T>
Tensor<T> select_positions(const Tensor<T>& x, std::span<const std::size_t> positions) {
  if (x.rank() != 3) shape_fail("select_positions", "input must be [B, L, D], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (positions.size() != B) {
    shape_fail("select_positions", std::to_string(positions.size()) + " positions for batch " + std::to_string(B));
  }
  for (std::size_t p : positions)
    if (p >= L) shape_fail("select_positions", "position " + std::to_string(p) + " >= length " + std::to_string(L));
  std::vector<T> out(B * D);
  const auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((b * L + positions[b]) * D), D,
                out.begin() + static_cast<std::ptrdiff_t>(b * D));
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  return record_op<T>(Primitive::gather, {&x}, Tensor<T>(Shape{B, D}, std::move(out)),
                      [pos = std::move(pos), L, D](std::span<const T> g, GradSink<T>& sink) {
                        auto gx = sink(0);
                        if (gx.empty()) return;
                        for (std::size_t b = 0; b < pos.size(); ++b)
                          for (std::size_t j = 0; j < D; ++j) gx[(b * L + pos[b]) * D + j] += g[b * D + j];
                      });
}

template <class T>
Tensor<T> space_to_depth(const Tensor<T>& x, std::size_t f) {
  if (x.rank() != 4) shape_fail("space_to_depth", "input must be [B, H, W, C], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  if (f == 0 || H % f != 0 || W % f != 0) {
    shape_fail("space_to_depth", "factor " + std::to_string(f) + " does not divide " + shape_str(x.shape()));
  }
  const std::size_t Ho = H / f, Wo = W / f, Co = f * f * C;
  std::vector<std::size_t> src(x.numel());
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j)
        for (std::size_t di = 0; di < f; ++di)
          for (std::size_t dj = 0; dj < f; ++dj)
            for (std::size_t c = 0; c < C; ++c) src[o++] = ((b * H + i * f + di) * W + j * f + dj) * C + c;
  auto offsets = std::make_shared<const std::vector<std::size_t>>(std::move(src));
  std::vector<T> out(x.numel());
  const auto xv = x.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = xv[(*offsets)[k]];
  return record_op<T>(Primitive::space_to_depth, {&x}, Tensor<T>(Shape{B, Ho, Wo, Co}, std::move(out)),
                      [offsets](std::span<const T> g, GradSink<T>& sink) {
                        auto gx = sink(0);
                        if (gx.empty()) return;
                        for (std::size_t k = 0; k < g.size(); ++k) gx[(*offsets)[k]] += g[k];
                      });
}

template <class T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (x.rank() != 3) shape_fail("depthwise_conv1d", "input must be [B, L, C], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
  if (w.rank() != 2 || w.dim(0) != C || bias.shape() != Shape{C}) {
    shape_fail("depthwise_conv1d", "weights " + shape_str(w.shape()) + " / bias " + shape_str(bias.shape()) +
                                       " do not match channels " + std::to_string(C));
  }
  const std::size_t K = w.dim(1);
  const auto xv = x.data();
  const auto wv = w.data();
  const auto bv = bias.data();
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t) {
      T* yr = out.data() + (b * L + t) * C;
      for (std::size_t c = 0; c < C; ++c) yr[c] = bv[c];
      for (std::size_t k = 0; k < K; ++k) {
        if (t + k + 1 < K) continue;
        const std::size_t s = t + k + 1 - K;
        const T* xr = xv.data() + (b * L + s) * C;
        for (std::size_t c = 0; c < C; ++c) yr[c] += wv[c * K + k] * xr[c];
      }
    }
  return record_op<T>(Primitive::depthwise_conv1d, {&x, &w, &bias}, Tensor<T>(x.shape(), std::move(out)),
                      [x, w, B, L, C, K](std::span<const T> g, GradSink<T>& sink) {
                        const auto xv = x.data();
                        const auto wv = w.data();
                        auto gx = sink(0);
                        auto gw = sink(1);
                        auto gb = sink(2);
                        for (std::size_t b = 0; b < B; ++b)
                          for (std::size_t t = 0; t < L; ++t) {
                            const T* gr = g.data() + (b * L + t) * C;
                            if (!gb.empty())
                              for (std::size_t c = 0; c < C; ++c) gb[c] += gr[c];
                            for (std::size_t k = 0; k < K; ++k) {
                              if (t + k + 1 < K) continue;
                              const std::size_t s = t + k + 1 - K;
                              if (!gx.empty())
                                for (std::size_t c = 0; c < C; ++c) gx[(b * L + s) * C + c] += wv[c * K + k] * gr[c];
                              if (!gw.empty())
                                for (std::size_t c = 0; c < C; ++c) gw[c * K + k] += xv[(b * L + s) * C + c] * gr[c];
                            }
                          }
                      });
}

#define MAMBACLIP_INSTANTIATE_OPS(T)                                                                    \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> scale<T>(const Tensor<T>&, double);                                                 \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, double);                                            \
  template Tensor<T> exp<T>(const Tensor<T>&);                                                           \
  template Tensor<T> log<T>(const Tensor<T>&);                                                           \
  template Tensor<T> softplus<T>(const Tensor<T>&);                                                      \
  template Tensor<T> silu<T>(const Tensor<T>&);                                                          \
  template Tensor<T> tanh<T>(const Tensor<T>&);                                                          \
  template Tensor<T> power<T>(const Tensor<T>&, double);                                                 \
  template Tensor<T> clamp_max<T>(const Tensor<T>&, double);                                             \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                           \
  template Tensor<T> sum<T>(const Tensor<T>&, std::size_t);                                              \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                          \
  template Tensor<T> mean<T>(const Tensor<T>&, std::size_t);                                             \
  template Tensor<T> max<T>(const Tensor<T>&, std::size_t);                                              \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                \
  template Tensor<T> transpose<T>(const Tensor<T>&, std::span<const std::size_t>);                       \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                                     \
  template Tensor<T> concat<T>(std::span<const Tensor<T>>, std::size_t);                                 \
  template Tensor<T> slice<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                  \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                                       \
  template Tensor<T> layernorm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);         \
  template Tensor<T> embedding<T>(const Tensor<T>&, std::span<const std::size_t>, const Shape&);         \
  template Tensor<T> depthwise_conv1d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> l2_normalize<T>(const Tensor<T>&, double);                                          \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, std::span<const std::size_t>);                   \
  template Tensor<T> gather<T>(const Tensor<T>&, std::size_t, std::span<const std::size_t>);             \
  template Tensor<T> select_positions<T>(const Tensor<T>&, std::span<const std::size_t>);                \
  template Tensor<T> space_to_depth<T>(const Tensor<T>&, std::size_t);

MAMBACLIP_INSTANTIATE_OPS(float)
MAMBACLIP_INSTANTIATE_OPS(double)
MAMBACLIP_INSTANTIATE_OPS(Dual)

}  // namespace mambaclip
