#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mambaclip/autodiff.hpp"
#include "mambaclip/clip.hpp"
#include "mambaclip/data.hpp"
#include "mambaclip/train.hpp"

// Extreme Hessian eigenvalues of the contrastive loss: Hessian-vector
// products feed a Lanczos iteration with full reorthogonalization.

namespace mambaclip {

/// Symmetric linear operator y = H·x of fixed dimension.
class HvpOracle {
 public:
  using Apply = std::function<std::vector<double>(std::span<const double>)>;

  HvpOracle(std::size_t dim, Apply apply);

  std::size_t dim() const { return dim_; }
  std::vector<double> operator()(std::span<const double> x) const;

  /// Row-major dense symmetric matrix.
  static HvpOracle dense(std::size_t n, std::vector<double> matrix);
  /// Hessian of loss_scale · clip_loss on one batch, w.r.t. all parameters.
  static HvpOracle clip_batch(ParamSet<double> params, ClipConfig cfg, const Tensor<double>& images,
                              std::vector<TokenSequence> tokens, double loss_scale = 1.0);

 private:
  std::size_t dim_;
  Apply apply_;
};

struct LanczosConfig {
  std::size_t k = 5;
  std::size_t iterations = 40;
  std::uint64_t seed = 0;
  /// Ritz pairs with residual ≤ tolerance · max|θ| count as converged.
  double tolerance = 1e-8;

  /// Requires 1 ≤ k ≤ iterations ≤ dim.
  void validate(std::size_t dim) const;
};

struct RitzValue {
  double value;
  double residual;  // ‖H·y − θ·y‖ for the unit Ritz vector y
  bool converged;
};

struct LanczosResult {
  std::vector<RitzValue> values;  // k entries, by decreasing magnitude
  std::size_t steps = 0;          // Lanczos vectors generated
  std::size_t restarts = 0;       // invariant subspaces hit before the end
};

/// Lanczos from a seeded random unit vector, reorthogonalizing every new
/// vector against the whole basis (twice). When the Krylov space becomes
/// invariant, the iteration continues from a fresh random vector orthogonal
/// to the basis. Returns the k largest-magnitude Ritz values, signs kept.
LanczosResult lanczos_extreme_eigs(const HvpOracle& oracle, const LanczosConfig& cfg);

/// Eigenvalues (ascending) of the symmetric tridiagonal matrix with diagonal
/// `diag` and off-diagonal `off` (off[i] couples i and i+1), by implicit QL
/// with Wilkinson shifts. If `vectors` is non-null it receives the
/// eigenvectors as columns of a row-major n×n matrix.
std::vector<double> tridiagonal_eigen(std::vector<double> diag, std::vector<double> off,
                                      std::vector<double>* vectors = nullptr);

struct SpectrumReport {
  std::string model;
  std::size_t batch_size = 0;
  std::size_t sample_count = 0;
  std::vector<std::vector<RitzValue>> batches;

  std::size_t batch_count() const { return batches.size(); }
};

/// Runs Lanczos on `make_oracle(b)` for b in [0, batch_count) with seed
/// derive_seed(cfg.seed, b) per batch.
SpectrumReport spectrum_run(std::size_t batch_count, const std::function<HvpOracle(std::size_t)>& make_oracle,
                            const LanczosConfig& cfg, std::size_t batch_size, std::string model);

struct HessianRunConfig {
  std::size_t batch_size = 15;
  std::size_t num_samples = 3000;
  LanczosConfig lanczos;
  double loss_scale = 1.0;
};

/// Splits the first min(num_samples, manifest size) pairs into consecutive
/// batches of batch_size (a trailing partial batch is dropped) and collects
/// the Lanczos spectrum of each batch's loss Hessian.
SpectrumReport hessian_spectrum_run(const ParamSet<double>& params, const ClipConfig& cfg, const PairedData& data,
                                    const HessianRunConfig& run, const std::string& model);

struct HistogramBin {
  double low;
  double high;
  std::size_t count;
};

struct SharpnessSummary {
  std::size_t total = 0;
  std::size_t negative_count = 0;
  double negative_fraction = 0.0;
  double max_abs_eigenvalue = 0.0;
  std::vector<HistogramBin> histogram;
};

/// `bins` equal-width bins spanning [min, max] of all eigenvalues; the last
/// bin is closed. A degenerate range is widened to ±0.5 around the value.
SharpnessSummary summarize_sharpness(const SpectrumReport& report, std::size_t bins = 20);

/// CSV `batch_index,rank,eigenvalue,converged` (rank 0 is the largest |λ|).
void write_spectrum_csv(const std::filesystem::path& path, const SpectrumReport& report);
/// CSV `bin_low,bin_high,count`.
void write_histogram_csv(const std::filesystem::path& path, const SharpnessSummary& summary);
/// JSON summary with the model id and batch/sample counts.
void write_sharpness_json(const std::filesystem::path& path, const SpectrumReport& report,
                          const SharpnessSummary& summary);

}  // namespace mambaclip
