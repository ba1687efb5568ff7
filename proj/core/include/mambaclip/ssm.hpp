#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mambaclip/autodiff.hpp"
#include "mambaclip/ops.hpp"
#include "mambaclip/rng.hpp"

// Selective state-space scan and the Mamba blocks built on it.
//
// Per channel c and state n:
//   a_bar_t = exp(Δ_t · A[c,n]),   b_bar_t = Δ_t · B_t[n]
//   h_t     = a_bar_t · h_{t-1} + b_bar_t · x_t,   h_0 = 0
//   y_t     = Σ_n C_t[n] · h_t[n] + D[c] · x_t

namespace mambaclip {

struct DiscreteStep {
  double a_bar;
  double b_bar;
};

/// Zero-order hold on A, simplified Euler rule on B. Rejects delta <= 0.
DiscreteStep discretize(double delta, double a, double b);

/// One scan problem. x, delta: [B, L, C]; b, c: [B, L, N].
template <class T>
struct ScanSequence {
  Tensor<T> x;
  Tensor<T> delta;
  Tensor<T> b;
  Tensor<T> c;
};

enum class ScanMode { sequential, parallel };

/// Selective scan with A: [C, N] (negative entries) and D: [C]. Returns y: [B, L, C].
template <class T>
Tensor<T> selective_scan(const ScanSequence<T>& seq, const Tensor<T>& a, const Tensor<T>& d, ScanMode mode);

template <class T>
Tensor<T> selective_scan_seq(const ScanSequence<T>& seq, const Tensor<T>& a, const Tensor<T>& d) {
  return selective_scan(seq, a, d, ScanMode::sequential);
}

/// Same contract as selective_scan_seq, computed with an associative prefix
/// scan over (a_bar, b_bar·x) pairs in both the forward and adjoint sweeps.
template <class T>
Tensor<T> selective_scan_parallel(const ScanSequence<T>& seq, const Tensor<T>& a, const Tensor<T>& d) {
  return selective_scan(seq, a, d, ScanMode::parallel);
}

/// Input-dependent SSM parameters for one scan direction.
/// Δ = softplus(u·dt_down·dt_proj + dt_bias), B = u·b_proj, C = u·c_proj,
/// A = −exp(a_log).
template <class T>
struct SsmParams {
  Tensor<T> a_log;    // [C, N]
  Tensor<T> d_skip;   // [C]
  Tensor<T> dt_down;  // [C, R]
  Tensor<T> dt_proj;  // [R, C]
  Tensor<T> dt_bias;  // [C]
  Tensor<T> b_proj;   // [C, N]
  Tensor<T> c_proj;   // [C, N]

  static SsmParams from(const ParamSet<T>& params, const std::string& prefix);
};

/// Computes Δ, B, C from u ([B, L, C]) and runs the scan.
template <class T>
Tensor<T> ssm_forward(const Tensor<T>& u, const SsmParams<T>& p, ScanMode mode);

/// Traversal order of an H×W grid for one of the four scan directions:
/// 0 row-major, 1 reverse row-major, 2 column-major, 3 reverse column-major.
/// order[i] is the row-major index of the i-th visited cell.
std::vector<std::size_t> cross_scan_order(std::size_t height, std::size_t width, int direction);

/// Four-direction scan of a [B, H, W, C] feature map; the four
/// inverse-permuted outputs are summed.
template <class T>
Tensor<T> cross_scan_2d(const Tensor<T>& feature_map, std::span<const SsmParams<T>, 4> params, ScanMode mode);

struct MambaBlockConfig {
  std::size_t model_dim = 32;
  std::size_t inner_dim = 64;
  std::size_t state_dim = 8;
  std::size_t conv_width = 4;
  std::size_t dt_rank = 2;
  bool cross_scan_2d = false;

  void validate() const;
};

template <class T>
struct MambaBlockWeights {
  Tensor<T> in_weight;    // [D, 2I]
  Tensor<T> in_bias;      // [2I]
  Tensor<T> conv_weight;  // [I, K]
  Tensor<T> conv_bias;    // [I]
  Tensor<T> out_weight;   // [I, D]
  Tensor<T> out_bias;     // [D]
  std::vector<SsmParams<T>> ssm;  // 1 direction, or 4 for cross-scan

  static MambaBlockWeights from(const ParamSet<T>& params, const std::string& prefix, const MambaBlockConfig& cfg);
};

struct GridSize {
  std::size_t height;
  std::size_t width;
};

/// x: [B, L, model_dim] -> [B, L, model_dim].
/// in-projection to two inner branches; main: causal depthwise conv -> silu ->
/// scan (cross-scan over `grid` when configured); gate: silu; product;
/// out-projection; residual add.
template <class T>
Tensor<T> mamba_block_forward(const Tensor<T>& x, const MambaBlockConfig& cfg, const MambaBlockWeights<T>& w,
                              std::optional<GridSize> grid, ScanMode mode);

/// Adds freshly initialized block parameters under `prefix`.
void init_ssm_params(ParamSet<double>& params, const std::string& prefix, std::size_t channels,
                     std::size_t state_dim, std::size_t dt_rank, Rng& rng);
void init_mamba_block(ParamSet<double>& params, const std::string& prefix, const MambaBlockConfig& cfg, Rng& rng);

}  // namespace mambaclip
