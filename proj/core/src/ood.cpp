#include "mambaclip/ood.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <map>
#include <numbers>
#include <stdexcept>

#include "mambaclip/clip.hpp"
#include "mambaclip/rng.hpp"

namespace mambaclip {

std::vector<std::string> categories16() { return {kCategories16.begin(), kCategories16.end()}; }

namespace {

constexpr std::array<std::pair<PerturbationKind, std::string_view>, 9> kKindNames = {{
    {PerturbationKind::color_grayscale, "color-grayscale"},
    {PerturbationKind::contrast, "contrast"},
    {PerturbationKind::uniform_noise, "uniform-noise"},
    {PerturbationKind::low_pass, "low-pass"},
    {PerturbationKind::high_pass, "high-pass"},
    {PerturbationKind::phase_scramble, "phase-scramble"},
    {PerturbationKind::power_equalize, "power-equalize"},
    {PerturbationKind::rotation, "rotation"},
    {PerturbationKind::false_color, "false-color"},
}};

constexpr std::array<PerturbationKind, 9> kAllKinds = {
    PerturbationKind::color_grayscale, PerturbationKind::contrast,      PerturbationKind::uniform_noise,
    PerturbationKind::low_pass,        PerturbationKind::high_pass,     PerturbationKind::phase_scramble,
    PerturbationKind::power_equalize,  PerturbationKind::rotation,      PerturbationKind::false_color};

constexpr double kLumaR = 0.2126, kLumaG = 0.7152, kLumaB = 0.0722;

void check_image(const Tensor<double>& image, const char* what) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw ShapeError(std::string(what) + ": expected an H×W×3 image, got " + shape_str(image.shape()));
  }
}

void check_frequency_image(const Tensor<double>& image, const char* what) {
  check_image(image, what);
  if (image.dim(0) < 2 || image.dim(1) < 2) {
    throw ShapeError(std::string(what) + ": frequency-domain kinds need H, W >= 2");
  }
}

// Identity level of each kind; high-pass has none.
std::optional<double> identity_level(PerturbationKind kind) {
  switch (kind) {
    case PerturbationKind::contrast:
      return 1.0;
    case PerturbationKind::high_pass:
      return std::nullopt;
    default:
      return 0.0;
  }
}

// +1 when severity grows with the level, -1 when it shrinks.
int severity_direction(PerturbationKind kind) {
  return kind == PerturbationKind::contrast || kind == PerturbationKind::high_pass ? -1 : 1;
}

bool in_domain(PerturbationKind kind, double level) {
  if (!std::isfinite(level)) return false;
  switch (kind) {
    case PerturbationKind::color_grayscale:
    case PerturbationKind::power_equalize:
    case PerturbationKind::false_color:
      return level == 0.0 || level == 1.0;
    case PerturbationKind::contrast:
      return level > 0.0 && level <= 1.0;
    case PerturbationKind::uniform_noise:
    case PerturbationKind::low_pass:
      return level >= 0.0;
    case PerturbationKind::high_pass:
      return level > 0.0;
    case PerturbationKind::phase_scramble:
      return level >= 0.0 && level <= 1.0;
    case PerturbationKind::rotation:
      return level == 0.0 || level == 90.0 || level == 180.0 || level == 270.0;
  }
  return false;
}

class Fft2d {
 public:
  Fft2d(std::size_t h, std::size_t w)
      : h_(h), w_(w), buf_(fftw_alloc_complex(h * w)) {
    if (buf_ == nullptr) throw std::bad_alloc();
    const int hi = static_cast<int>(h), wi = static_cast<int>(w);
    forward_ = fftw_plan_dft_2d(hi, wi, buf_, buf_, FFTW_FORWARD, FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_2d(hi, wi, buf_, buf_, FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  Fft2d(const Fft2d&) = delete;
  Fft2d& operator=(const Fft2d&) = delete;
  ~Fft2d() {
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
    fftw_free(buf_);
  }

  std::size_t size() const { return h_ * w_; }
  std::size_t conjugate(std::size_t k) const {
    const std::size_t i = k / w_, j = k % w_;
    return ((h_ - i) % h_) * w_ + (w_ - j) % w_;
  }

  std::vector<std::complex<double>> forward(std::span<const double> image, std::size_t channel) {
    for (std::size_t k = 0; k < size(); ++k) {
      buf_[k][0] = image[k * 3 + channel];
      buf_[k][1] = 0.0;
    }
    fftw_execute(forward_);
    std::vector<std::complex<double>> out(size());
    for (std::size_t k = 0; k < size(); ++k) out[k] = {buf_[k][0], buf_[k][1]};
    return out;
  }

  // Real part of the normalized inverse transform into one channel.
  void inverse(std::span<const std::complex<double>> spectrum, std::vector<double>& image, std::size_t channel) {
    for (std::size_t k = 0; k < size(); ++k) {
      buf_[k][0] = spectrum[k].real();
      buf_[k][1] = spectrum[k].imag();
    }
    fftw_execute(inverse_);
    const double n = static_cast<double>(size());
    for (std::size_t k = 0; k < size(); ++k) image[k * 3 + channel] = buf_[k][0] / n;
  }

 private:
  std::size_t h_, w_;
  fftw_complex* buf_;
  fftw_plan forward_;
  fftw_plan inverse_;
};

Tensor<double> clamp01(const Tensor<double>& x) {
  std::vector<double> v = x.to_vector();
  for (double& e : v) e = std::clamp(e, 0.0, 1.0);
  return Tensor<double>(x.shape(), std::move(v));
}

Tensor<double> image_at(const Tensor<double>& batch, std::size_t i) {
  const std::size_t per = batch.numel() / batch.dim(0);
  const auto src = batch.data().subspan(i * per, per);
  return Tensor<double>({batch.dim(1), batch.dim(2), batch.dim(3)}, {src.begin(), src.end()});
}

Tensor<double> stack(std::span<const Tensor<double>> images) {
  Shape shape = images.front().shape();
  std::vector<double> all;
  all.reserve(images.size() * images.front().numel());
  for (const auto& im : images) {
    if (im.shape() != shape) throw ShapeError("stack: images differ in shape");
    all.insert(all.end(), im.data().begin(), im.data().end());
  }
  shape.insert(shape.begin(), images.size());
  return Tensor<double>(std::move(shape), std::move(all));
}

std::vector<std::size_t> predict(const ImageEmbedder& embed, const Tensor<double>& images,
                                 const ClassEmbeddingMatrix& classes, std::size_t chunk = 32) {
  const std::size_t n = images.dim(0);
  std::vector<std::size_t> out;
  out.reserve(n);
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < n; start += chunk) {
    rows.clear();
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) rows.push_back(i);
    const auto p = classify_rows(embed(batch_rows<double>(images, rows)), classes);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::size_t class_index(const ClassEmbeddingMatrix& classes, const std::string& name, std::size_t line) {
  const auto it = std::find(classes.names.begin(), classes.names.end(), name);
  if (it == classes.names.end()) {
    throw ManifestError("line " + std::to_string(line) + ": category '" + name + "' is not a class");
  }
  return static_cast<std::size_t>(it - classes.names.begin());
}

}  // namespace

PerturbationKind parse_perturbation_kind(std::string_view name) {
  for (const auto& [kind, n] : kKindNames) {
    if (n == name) return kind;
  }
  throw std::invalid_argument("unknown perturbation kind '" + std::string(name) + "'");
}

std::string_view perturbation_kind_name(PerturbationKind kind) {
  for (const auto& [k, n] : kKindNames) {
    if (k == kind) return n;
  }
  throw std::invalid_argument("unknown perturbation kind");
}

std::span<const PerturbationKind> all_perturbation_kinds() { return kAllKinds; }

bool is_stochastic(PerturbationKind kind) {
  return kind == PerturbationKind::uniform_noise || kind == PerturbationKind::phase_scramble;
}

std::vector<double> perturbation_ladder(PerturbationKind kind) {
  switch (kind) {
    case PerturbationKind::color_grayscale:
    case PerturbationKind::power_equalize:
    case PerturbationKind::false_color:
      return {0.0, 1.0};
    case PerturbationKind::contrast:
      return {1.0, 0.5, 0.3, 0.15, 0.1, 0.05, 0.03, 0.01};
    case PerturbationKind::uniform_noise:
      return {0.0, 0.03, 0.05, 0.1, 0.2, 0.35, 0.6, 0.9};
    case PerturbationKind::low_pass:
      return {0.0, 1.0, 3.0, 5.0, 7.0, 10.0, 15.0, 40.0};
    case PerturbationKind::high_pass:
      return {3.0, 1.5, 1.0, 0.7, 0.55, 0.45, 0.4};
    case PerturbationKind::phase_scramble: {
      std::vector<double> v(8);
      for (std::size_t i = 0; i < 8; ++i) v[i] = static_cast<double>(i) / 7.0;
      return v;
    }
    case PerturbationKind::rotation:
      return {0.0, 90.0, 180.0, 270.0};
  }
  throw std::invalid_argument("unknown perturbation kind");
}

void check_ladder(PerturbationKind kind, std::span<const double> ladder) {
  const auto name = std::string(perturbation_kind_name(kind));
  if (ladder.empty()) throw std::invalid_argument(name + " ladder is empty");
  for (std::size_t i = 0; i < ladder.size(); ++i) {
    if (!in_domain(kind, ladder[i])) {
      throw std::invalid_argument(name + " level " + std::to_string(ladder[i]) + " is outside the kind's domain");
    }
    if (i > 0 && (ladder[i] - ladder[i - 1]) * severity_direction(kind) <= 0.0) {
      throw std::invalid_argument(name + " ladder is not strictly ordered by severity");
    }
  }
}

void PerturbationSpec::validate(std::span<const double> ladder) const {
  const std::vector<double> def = ladder.empty() ? perturbation_ladder(kind) : std::vector<double>{};
  const std::span<const double> levels = ladder.empty() ? std::span<const double>(def) : ladder;
  check_ladder(kind, levels);
  if (std::find(levels.begin(), levels.end(), level) == levels.end()) {
    throw std::invalid_argument(std::string(perturbation_kind_name(kind)) + " level " + std::to_string(level) +
                                " is not on the ladder");
  }
  if (is_stochastic(kind) && !seed) {
    throw std::invalid_argument(std::string(perturbation_kind_name(kind)) + " needs a seed");
  }
}

Tensor<double> grayscale(const Tensor<double>& image) {
  check_image(image, "grayscale");
  std::vector<double> v = image.to_vector();
  for (std::size_t p = 0; p < v.size(); p += 3) {
    const double r = v[p], g = v[p + 1], b = v[p + 2];
    const double y = (r == g && g == b) ? r : std::clamp(kLumaR * r + kLumaG * g + kLumaB * b, 0.0, 1.0);
    v[p] = v[p + 1] = v[p + 2] = y;
  }
  return Tensor<double>(image.shape(), std::move(v));
}

Tensor<double> contrast(const Tensor<double>& image, double c) {
  check_image(image, "contrast");
  std::vector<double> v = image.to_vector();
  for (double& x : v) x = c * (x - 0.5) + 0.5;
  return Tensor<double>(image.shape(), std::move(v));
}

Tensor<double> uniform_noise(const Tensor<double>& image, double w, std::uint64_t seed) {
  check_image(image, "uniform_noise");
  Rng rng(seed);
  std::vector<double> v = image.to_vector();
  for (double& x : v) x += rng.uniform(-w, w);
  return Tensor<double>(image.shape(), std::move(v));
}

Tensor<double> gaussian_blur(const Tensor<double>& image, double sigma) {
  check_image(image, "gaussian_blur");
  if (!(sigma >= 0.0)) throw std::invalid_argument("gaussian_blur: sigma must be non-negative");
  if (sigma == 0.0) return image;
  const auto r = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * r + 1));
  double total = 0.0;
  for (std::ptrdiff_t k = -r; k <= r; ++k) {
    const double g = std::exp(-static_cast<double>(k * k) / (2.0 * sigma * sigma));
    kernel[static_cast<std::size_t>(k + r)] = g;
    total += g;
  }
  for (double& g : kernel) g /= total;

  const auto H = static_cast<std::ptrdiff_t>(image.dim(0)), W = static_cast<std::ptrdiff_t>(image.dim(1));
  const auto src = image.data();
  std::vector<double> tmp(src.size()), out(src.size());
  const auto at = [](std::ptrdiff_t i, std::ptrdiff_t j, std::ptrdiff_t W, std::ptrdiff_t c) {
    return static_cast<std::size_t>((i * W + j) * 3 + c);
  };
  for (std::ptrdiff_t i = 0; i < H; ++i)
    for (std::ptrdiff_t j = 0; j < W; ++j)
      for (std::ptrdiff_t c = 0; c < 3; ++c) {
        double s = 0.0;
        for (std::ptrdiff_t k = -r; k <= r; ++k) {
          s += kernel[static_cast<std::size_t>(k + r)] * src[at(i, std::clamp<std::ptrdiff_t>(j + k, 0, W - 1), W, c)];
        }
        tmp[at(i, j, W, c)] = s;
      }
  for (std::ptrdiff_t i = 0; i < H; ++i)
    for (std::ptrdiff_t j = 0; j < W; ++j)
      for (std::ptrdiff_t c = 0; c < 3; ++c) {
        double s = 0.0;
        for (std::ptrdiff_t k = -r; k <= r; ++k) {
          s += kernel[static_cast<std::size_t>(k + r)] * tmp[at(std::clamp<std::ptrdiff_t>(i + k, 0, H - 1), j, W, c)];
        }
        out[at(i, j, W, c)] = s;
      }
  return Tensor<double>(image.shape(), std::move(out));
}

Tensor<double> high_pass(const Tensor<double>& image, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("high_pass: sigma must be positive");
  const Tensor<double> blurred = gaussian_blur(image, sigma);
  std::vector<double> v = image.to_vector();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = v[i] - blurred[i] + 0.5;
  return Tensor<double>(image.shape(), std::move(v));
}

Tensor<double> phase_scramble(const Tensor<double>& image, double w, std::uint64_t seed) {
  check_frequency_image(image, "phase_scramble");
  Fft2d fft(image.dim(0), image.dim(1));
  const std::size_t n = fft.size();
  std::vector<double> phase(n, 0.0);
  Rng rng(seed);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t c = fft.conjugate(k);
    if (k < c) {
      phase[k] = rng.uniform(-1.0, 1.0) * w * std::numbers::pi;
      phase[c] = -phase[k];
    }
  }
  std::vector<double> out(image.numel());
  for (std::size_t ch = 0; ch < 3; ++ch) {
    auto spectrum = fft.forward(image.data(), ch);
    for (std::size_t k = 0; k < n; ++k) spectrum[k] *= std::polar(1.0, phase[k]);
    fft.inverse(spectrum, out, ch);
  }
  return Tensor<double>(image.shape(), std::move(out));
}

std::vector<Tensor<double>> power_equalize(std::span<const Tensor<double>> images) {
  if (images.empty()) throw std::invalid_argument("power_equalize: no images");
  const Shape& shape = images.front().shape();
  for (const auto& im : images) {
    check_frequency_image(im, "power_equalize");
    if (im.shape() != shape) throw ShapeError("power_equalize: images differ in shape");
  }
  Fft2d fft(shape[0], shape[1]);
  const std::size_t n = fft.size();
  std::vector<std::vector<std::complex<double>>> spectra(images.size() * 3);
  std::vector<double> mean_amp(n * 3, 0.0);
  for (std::size_t i = 0; i < images.size(); ++i)
    for (std::size_t ch = 0; ch < 3; ++ch) {
      auto& s = spectra[i * 3 + ch];
      s = fft.forward(images[i].data(), ch);
      for (std::size_t k = 0; k < n; ++k) mean_amp[ch * n + k] += std::abs(s[k]);
    }
  for (double& a : mean_amp) a /= static_cast<double>(images.size());
  std::vector<Tensor<double>> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::vector<double> pixels(images[i].numel());
    for (std::size_t ch = 0; ch < 3; ++ch) {
      auto& s = spectra[i * 3 + ch];
      for (std::size_t k = 0; k < n; ++k) s[k] = std::polar(mean_amp[ch * n + k], std::arg(s[k]));
      fft.inverse(s, pixels, ch);
    }
    out.emplace_back(shape, std::move(pixels));
  }
  return out;
}

Tensor<double> rotate(const Tensor<double>& image, int degrees) {
  check_image(image, "rotate");
  if (degrees % 90 != 0) throw std::invalid_argument("rotate: angle must be a multiple of 90 degrees");
  const int turns = ((degrees / 90) % 4 + 4) % 4;
  Tensor<double> cur = image;
  for (int t = 0; t < turns; ++t) {
    const std::size_t H = cur.dim(0), W = cur.dim(1);
    std::vector<double> v(cur.numel());
    // Counter-clockwise: out(i, j) = in(j, W-1-i), output is W×H.
    for (std::size_t i = 0; i < W; ++i)
      for (std::size_t j = 0; j < H; ++j)
        for (std::size_t c = 0; c < 3; ++c) v[(i * H + j) * 3 + c] = cur[(j * W + (W - 1 - i)) * 3 + c];
    cur = Tensor<double>({W, H, 3}, std::move(v));
  }
  return cur;
}

Tensor<double> false_color(const Tensor<double>& image) {
  check_image(image, "false_color");
  std::vector<double> v = image.to_vector();
  for (std::size_t p = 0; p < v.size(); p += 3) {
    const double r = v[p], g = v[p + 1], b = v[p + 2];
    const double y = kLumaR * r + kLumaG * g + kLumaB * b;
    const double r2 = 1.0 - r, b2 = 1.0 - b;
    const double shift = y - (kLumaR * r2 + kLumaG * g + kLumaB * b2);
    v[p] = r2 + shift;
    v[p + 1] = g + shift;
    v[p + 2] = b2 + shift;
  }
  return Tensor<double>(image.shape(), std::move(v));
}

Tensor<double> amplitude_spectrum(const Tensor<double>& image) {
  check_frequency_image(image, "amplitude_spectrum");
  Fft2d fft(image.dim(0), image.dim(1));
  std::vector<double> out(image.numel());
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const auto s = fft.forward(image.data(), ch);
    for (std::size_t k = 0; k < s.size(); ++k) out[k * 3 + ch] = std::abs(s[k]);
  }
  return Tensor<double>(image.shape(), std::move(out));
}

Tensor<double> apply_perturbation_unclamped(const Tensor<double>& image, const PerturbationSpec& spec,
                                            std::span<const double> ladder) {
  spec.validate(ladder);
  check_image(image, "apply_perturbation");
  if (identity_level(spec.kind) == spec.level) return image;
  switch (spec.kind) {
    case PerturbationKind::color_grayscale:
      return grayscale(image);
    case PerturbationKind::contrast:
      return contrast(image, spec.level);
    case PerturbationKind::uniform_noise:
      return uniform_noise(image, spec.level, *spec.seed);
    case PerturbationKind::low_pass:
      return gaussian_blur(image, spec.level);
    case PerturbationKind::high_pass:
      return high_pass(image, spec.level);
    case PerturbationKind::phase_scramble:
      return phase_scramble(image, spec.level, *spec.seed);
    case PerturbationKind::power_equalize:
      return power_equalize(std::span<const Tensor<double>>(&image, 1)).front();
    case PerturbationKind::rotation:
      return rotate(image, static_cast<int>(spec.level));
    case PerturbationKind::false_color:
      return false_color(image);
  }
  throw std::invalid_argument("unknown perturbation kind");
}

Tensor<double> apply_perturbation(const Tensor<double>& image, const PerturbationSpec& spec,
                                  std::span<const double> ladder) {
  if (identity_level(spec.kind) == spec.level) {
    spec.validate(ladder);
    check_image(image, "apply_perturbation");
    return image;
  }
  return clamp01(apply_perturbation_unclamped(image, spec, ladder));
}

std::vector<std::size_t> category16_labels(const DatasetManifest& manifest, const ClassEmbeddingMatrix& classes) {
  std::vector<std::size_t> labels;
  labels.reserve(manifest.records.size());
  for (const auto& r : manifest.records) {
    if (!r.category16) throw ManifestError("line " + std::to_string(r.line) + ": record has no category16");
    labels.push_back(class_index(classes, *r.category16, r.line));
  }
  return labels;
}

OodCurve evaluate_ood(const ImageEmbedder& embed, std::size_t image_size, const DatasetManifest& manifest,
                      const ClassEmbeddingMatrix& classes, PerturbationKind kind, std::uint64_t seed,
                      const std::string& model, std::span<const double> ladder) {
  if (manifest.records.empty()) throw ManifestError("evaluate_ood: manifest has no records");
  const std::vector<double> levels =
      ladder.empty() ? perturbation_ladder(kind) : std::vector<double>(ladder.begin(), ladder.end());
  check_ladder(kind, levels);
  const auto labels = category16_labels(manifest, classes);
  const Tensor<double> clean = load_image_batch(manifest.records, image_size);
  const std::size_t n = manifest.records.size();
  std::vector<Tensor<double>> originals;
  originals.reserve(n);
  for (std::size_t i = 0; i < n; ++i) originals.push_back(image_at(clean, i));

  OodCurve curve{kind, model, {}};
  for (std::size_t l = 0; l < levels.size(); ++l) {
    std::vector<Tensor<double>> perturbed;
    perturbed.reserve(n);
    if (kind == PerturbationKind::power_equalize && levels[l] != 0.0) {
      for (auto& im : power_equalize(originals)) perturbed.push_back(clamp01(im));
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        const PerturbationSpec spec{kind, levels[l], derive_seed(seed, i, l)};
        perturbed.push_back(apply_perturbation(originals[i], spec, levels));
      }
    }
    const auto predicted = predict(embed, stack(perturbed), classes);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) correct += predicted[i] == labels[i] ? 1 : 0;
    curve.points.push_back({levels[l], static_cast<double>(correct) / static_cast<double>(n), n});
  }
  return curve;
}

EvalReport evaluate_stimulus(const ImageEmbedder& embed, std::size_t image_size, const DatasetManifest& manifest,
                             const ClassEmbeddingMatrix& classes, const std::string& dataset,
                             const std::string& model) {
  if (manifest.records.empty()) throw ManifestError("evaluate_stimulus: manifest has no records");
  const auto labels = category16_labels(manifest, classes);
  const auto predicted = predict(embed, load_image_batch(manifest.records, image_size), classes);
  EvalReport report = EvalReport::empty(dataset, model, classes.names);
  for (std::size_t i = 0; i < labels.size(); ++i) report.record(labels[i], predicted[i]);
  return report;
}

double ShapeBiasResult::shape_bias() const {
  if (!defined()) throw std::domain_error("shape bias is undefined: no shape or texture decisions");
  return static_cast<double>(shape_count) / static_cast<double>(shape_count + texture_count);
}

ShapeBiasResult tally_shape_bias(std::span<const std::string> predicted, std::span<const ImageRecord> records) {
  if (predicted.size() != records.size()) {
    throw std::invalid_argument("tally_shape_bias: " + std::to_string(predicted.size()) + " predictions for " +
                                std::to_string(records.size()) + " records");
  }
  ShapeBiasResult r;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    if (rec.shape_category.empty() || rec.texture_category.empty()) {
      throw ManifestError("line " + std::to_string(rec.line) + ": cue-conflict record needs both categories");
    }
    if (rec.shape_category == rec.texture_category) {
      throw ManifestError("line " + std::to_string(rec.line) + ": shape and texture category coincide");
    }
    if (predicted[i] == rec.shape_category) {
      ++r.shape_count;
    } else if (predicted[i] == rec.texture_category) {
      ++r.texture_count;
    } else {
      ++r.neither_count;
    }
  }
  return r;
}

ShapeBiasResult shape_bias(const ImageEmbedder& embed, std::size_t image_size, const DatasetManifest& manifest,
                           const ClassEmbeddingMatrix& classes) {
  if (manifest.kind != ManifestKind::cue_conflict) throw ManifestError("shape_bias needs a cue-conflict manifest");
  if (manifest.records.empty()) throw ManifestError("shape_bias: manifest has no records");
  for (const auto& r : manifest.records) {
    class_index(classes, r.shape_category, r.line);
    class_index(classes, r.texture_category, r.line);
  }
  const auto predicted = predict(embed, load_image_batch(manifest.records, image_size), classes);
  std::vector<std::string> names;
  names.reserve(predicted.size());
  for (std::size_t p : predicted) names.push_back(classes.names[p]);
  return tally_shape_bias(names, manifest.records);
}

void write_ood_csv(const std::filesystem::path& path, std::span<const OodCurve> curves) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "kind,level,accuracy,count\n";
  out.precision(17);
  for (const auto& c : curves)
    for (const auto& p : c.points) out << perturbation_kind_name(c.kind) << ',' << p.level << ',' << p.accuracy << ',' << p.count << '\n';
}

std::size_t perturb_tree(const std::filesystem::path& in, const std::filesystem::path& out,
                         const PerturbationSpec& spec) {
  namespace fs = std::filesystem;
  spec.validate();
  if (!fs::is_directory(in)) throw std::invalid_argument("perturb: input " + in.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(in)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension();
    if (ext == ".png" || ext == ".ten1") files.push_back(fs::relative(e.path(), in));
  }
  std::sort(files.begin(), files.end());
  std::vector<Tensor<double>> images;
  images.reserve(files.size());
  for (const auto& f : files) images.push_back(tensor_cast<double>(decode_image(in / f)));

  std::vector<Tensor<double>> result;
  if (spec.kind == PerturbationKind::power_equalize && spec.level != 0.0 && !images.empty()) {
    for (auto& im : power_equalize(images)) result.push_back(clamp01(im));
  } else {
    for (std::size_t i = 0; i < images.size(); ++i) {
      PerturbationSpec s = spec;
      if (s.seed) s.seed = derive_seed(*s.seed, i);
      result.push_back(apply_perturbation(images[i], s));
    }
  }
  for (std::size_t i = 0; i < files.size(); ++i) {
    const fs::path dst = (out / files[i]).replace_extension(".png");
    fs::create_directories(dst.parent_path());
    encode_png(dst, to_u8(tensor_cast<float>(result[i])));
  }
  return files.size();
}

}  // namespace mambaclip
