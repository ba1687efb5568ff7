#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mambaclip/data.hpp"
#include "mambaclip/tensor.hpp"
#include "mambaclip/zeroshot.hpp"

// Distortion ladders and robustness metrics. Images are H×W×3 doubles in
// [0, 1]; every perturbation returns a new image of the same value range.

namespace mambaclip {

/// The 16 coarse object categories shared by the OOD stimulus sets.
inline constexpr std::array<std::string_view, 16> kCategories16 = {
    "airplane", "bear", "bicycle", "bird",     "boat",  "bottle", "car",   "cat",
    "chair",    "clock", "dog",    "elephant", "keyboard", "knife", "oven", "truck"};

std::vector<std::string> categories16();

enum class PerturbationKind {
  color_grayscale,
  contrast,
  uniform_noise,
  low_pass,
  high_pass,
  phase_scramble,
  power_equalize,
  rotation,
  false_color,
};

/// Kebab-case names, e.g. "uniform-noise".
PerturbationKind parse_perturbation_kind(std::string_view name);
std::string_view perturbation_kind_name(PerturbationKind kind);
std::span<const PerturbationKind> all_perturbation_kinds();

/// uniform-noise and phase-scramble.
bool is_stochastic(PerturbationKind kind);

/// Default levels ordered from mildest to most severe.
///   color-grayscale, power-equalize, false-color: {0, 1}
///   contrast: {1, .5, .3, .15, .1, .05, .03, .01}
///   uniform-noise: {0, .03, .05, .1, .2, .35, .6, .9}
///   low-pass sigma: {0, 1, 3, 5, 7, 10, 15, 40}
///   high-pass sigma: {3, 1.5, 1, .7, .55, .45, .4}
///   phase-scramble: 8 evenly spaced values from 0 to 1
///   rotation: {0, 90, 180, 270}
std::vector<double> perturbation_ladder(PerturbationKind kind);

/// Throws std::invalid_argument unless every level lies in the kind's domain
/// and the ladder is strictly monotone in severity.
void check_ladder(PerturbationKind kind, std::span<const double> ladder);

struct PerturbationSpec {
  PerturbationKind kind;
  double level;
  std::optional<std::uint64_t> seed;

  /// Level must be one of `ladder` (the default ladder when empty);
  /// stochastic kinds need a seed.
  void validate(std::span<const double> ladder = {}) const;
};

/// Applies the distortion and clamps to [0, 1]. The identity level of each
/// kind returns the input unchanged. power-equalize on a single image uses
/// that image as the whole batch; see power_equalize() for batches.
Tensor<double> apply_perturbation(const Tensor<double>& image, const PerturbationSpec& spec,
                                  std::span<const double> ladder = {});
/// Same as apply_perturbation but without the final clamp.
Tensor<double> apply_perturbation_unclamped(const Tensor<double>& image, const PerturbationSpec& spec,
                                            std::span<const double> ladder = {});

/// Luminance 0.2126R + 0.7152G + 0.0722B in all channels. Gray pixels are
/// returned as they are.
Tensor<double> grayscale(const Tensor<double>& image);
/// c·(x - 0.5) + 0.5, unclamped.
Tensor<double> contrast(const Tensor<double>& image, double c);
/// x + U(-w, w) per value in row-major order from Rng(seed), unclamped.
Tensor<double> uniform_noise(const Tensor<double>& image, double w, std::uint64_t seed);
/// Separable Gaussian blur with radius ceil(3σ) and edge replication.
Tensor<double> gaussian_blur(const Tensor<double>& image, double sigma);
/// x - blur_σ(x) + 0.5, unclamped.
Tensor<double> high_pass(const Tensor<double>& image, double sigma);
/// Adds conjugate-symmetric phase noise u·w·π (u ~ U(-1, 1), one field for
/// all channels) to each channel's 2D spectrum; unclamped.
Tensor<double> phase_scramble(const Tensor<double>& image, double w, std::uint64_t seed);
/// Gives every image the batch-mean amplitude spectrum per channel while
/// keeping its phases. All images must share one shape; unclamped.
std::vector<Tensor<double>> power_equalize(std::span<const Tensor<double>> images);
/// Counter-clockwise rotation by a multiple of 90 degrees.
Tensor<double> rotate(const Tensor<double>& image, int degrees);
/// R -> 1-R and B -> 1-B, then every channel shifted so the pixel keeps its
/// original luminance; unclamped.
Tensor<double> false_color(const Tensor<double>& image);

/// Per-channel |DFT| as [H, W, 3].
Tensor<double> amplitude_spectrum(const Tensor<double>& image);

struct OodPoint {
  double level;
  double accuracy;
  std::size_t count;
};

struct OodCurve {
  PerturbationKind kind;
  std::string model;
  std::vector<OodPoint> points;
};

/// Ground-truth class index of every record from its category16 field.
/// Throws ManifestError when missing or not among `classes`.
std::vector<std::size_t> category16_labels(const DatasetManifest& manifest, const ClassEmbeddingMatrix& classes);

/// One accuracy per ladder level. Record i at level index l uses the seed
/// derive_seed(seed, i, l); power-equalize averages over the whole manifest.
OodCurve evaluate_ood(const ImageEmbedder& embed, std::size_t image_size, const DatasetManifest& manifest,
                      const ClassEmbeddingMatrix& classes, PerturbationKind kind, std::uint64_t seed,
                      const std::string& model, std::span<const double> ladder = {});

/// Zero-shot report over pre-generated stimuli, scored against category16.
EvalReport evaluate_stimulus(const ImageEmbedder& embed, std::size_t image_size, const DatasetManifest& manifest,
                             const ClassEmbeddingMatrix& classes, const std::string& dataset,
                             const std::string& model);

struct ShapeBiasResult {
  std::size_t shape_count = 0;
  std::size_t texture_count = 0;
  std::size_t neither_count = 0;

  bool defined() const { return shape_count + texture_count > 0; }
  /// shape / (shape + texture); throws std::domain_error when undefined.
  double shape_bias() const;
};

/// Tallies predicted class names against each record's shape and texture
/// categories. Records whose two categories coincide are rejected.
ShapeBiasResult tally_shape_bias(std::span<const std::string> predicted, std::span<const ImageRecord> records);

ShapeBiasResult shape_bias(const ImageEmbedder& embed, std::size_t image_size, const DatasetManifest& manifest,
                           const ClassEmbeddingMatrix& classes);

/// CSV with header `kind,level,accuracy,count`.
void write_ood_csv(const std::filesystem::path& path, std::span<const OodCurve> curves);

/// Perturbs every image file below `in` (sorted by relative path) and writes
/// PNGs under `out` with the same relative paths and a .png extension. File i
/// uses seed derive_seed(spec seed, i). Returns the number of files written.
std::size_t perturb_tree(const std::filesystem::path& in, const std::filesystem::path& out,
                         const PerturbationSpec& spec);

}  // namespace mambaclip
