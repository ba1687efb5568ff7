#pragma once

#include <cmath>
#include <concepts>
#include <ostream>

namespace mambaclip {

/// Forward-mode dual number `value + tangent·ε` with ε² = 0.
///
/// Running the reverse-mode tape on `Tensor<Dual>` gives forward-over-reverse
/// differentiation: seeding parameter tangents with a direction v makes every
/// gradient entry carry (∇L)_i in `value` and (H·v)_i in `tangent`.
struct Dual {
  double value = 0.0;
  double tangent = 0.0;

  constexpr Dual() = default;
  constexpr Dual(double v) : value(v) {}  // NOLINT: implicit by design of the scalar concept
  constexpr Dual(double v, double t) : value(v), tangent(t) {}

  constexpr Dual& operator+=(const Dual& o) {
    value += o.value;
    tangent += o.tangent;
    return *this;
  }
  constexpr Dual& operator-=(const Dual& o) {
    value -= o.value;
    tangent -= o.tangent;
    return *this;
  }
  constexpr Dual& operator*=(const Dual& o) {
    tangent = tangent * o.value + value * o.tangent;
    value *= o.value;
    return *this;
  }
  constexpr Dual& operator/=(const Dual& o) {
    const double inv = 1.0 / o.value;
    tangent = (tangent - value * inv * o.tangent) * inv;
    value *= inv;
    return *this;
  }
};

constexpr Dual operator-(const Dual& a) { return {-a.value, -a.tangent}; }
constexpr Dual operator+(Dual a, const Dual& b) { return a += b; }
constexpr Dual operator-(Dual a, const Dual& b) { return a -= b; }
constexpr Dual operator*(Dual a, const Dual& b) { return a *= b; }
constexpr Dual operator/(Dual a, const Dual& b) { return a /= b; }

constexpr bool operator==(const Dual& a, const Dual& b) { return a.value == b.value; }
constexpr auto operator<=>(const Dual& a, const Dual& b) { return a.value <=> b.value; }

inline Dual exp(const Dual& a) {
  const double e = std::exp(a.value);
  return {e, e * a.tangent};
}
inline Dual log(const Dual& a) { return {std::log(a.value), a.tangent / a.value}; }
inline Dual log1p(const Dual& a) { return {std::log1p(a.value), a.tangent / (1.0 + a.value)}; }
inline Dual expm1(const Dual& a) { return {std::expm1(a.value), std::exp(a.value) * a.tangent}; }
inline Dual sqrt(const Dual& a) {
  const double s = std::sqrt(a.value);
  return {s, a.tangent / (2.0 * s)};
}
inline Dual tanh(const Dual& a) {
  const double t = std::tanh(a.value);
  return {t, (1.0 - t * t) * a.tangent};
}
inline Dual pow(const Dual& a, double p) {
  const double v = std::pow(a.value, p);
  return {v, p == 0.0 ? 0.0 : p * std::pow(a.value, p - 1.0) * a.tangent};
}
inline Dual abs(const Dual& a) { return a.value < 0.0 ? -a : a; }
inline bool isfinite(const Dual& a) { return std::isfinite(a.value) && std::isfinite(a.tangent); }

inline std::ostream& operator<<(std::ostream& os, const Dual& d) {
  return os << d.value << "+" << d.tangent << "e";
}

/// Primal part of a scalar; identity for plain floating point.
constexpr double value_of(double x) { return x; }
constexpr double value_of(float x) { return x; }
constexpr double value_of(const Dual& x) { return x.value; }
template <std::integral I>
constexpr double value_of(I x) {
  return static_cast<double>(x);
}

}  // namespace mambaclip
