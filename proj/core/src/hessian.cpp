#include "mambaclip/hessian.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <stdexcept>

#include "mambaclip/ops.hpp"
#include "mambaclip/rng.hpp"

namespace mambaclip {

HvpOracle::HvpOracle(std::size_t dim, Apply apply) : dim_(dim), apply_(std::move(apply)) {
  if (dim == 0) throw std::invalid_argument("HvpOracle: dimension must be positive");
  if (!apply_) throw std::invalid_argument("HvpOracle: empty operator");
}

std::vector<double> HvpOracle::operator()(std::span<const double> x) const {
  if (x.size() != dim_) {
    throw ShapeError("HvpOracle: vector has " + std::to_string(x.size()) + " entries, operator dimension is " +
                     std::to_string(dim_));
  }
  std::vector<double> y = apply_(x);
  if (y.size() != dim_) throw ShapeError("HvpOracle: operator returned the wrong dimension");
  return y;
}

HvpOracle HvpOracle::dense(std::size_t n, std::vector<double> matrix) {
  if (matrix.size() != n * n) throw ShapeError("HvpOracle::dense: matrix is not n×n");
  return HvpOracle(n, [n, m = std::move(matrix)](std::span<const double> x) {
    std::vector<double> y(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += m[i * n + j] * x[j];
      y[i] = s;
    }
    return y;
  });
}

HvpOracle HvpOracle::clip_batch(ParamSet<double> params, ClipConfig cfg, const Tensor<double>& images,
                                std::vector<TokenSequence> tokens, double loss_scale) {
  if (images.dim(0) != tokens.size()) throw ShapeError("clip_batch: images and captions differ in count");
  const std::size_t dim = params.flat_dim();
  return HvpOracle(dim, [params = std::move(params), cfg = std::move(cfg), images = tensor_cast<Dual>(images),
                         tokens = std::move(tokens), loss_scale](std::span<const double> v) {
    return hvp([&](const ParamSet<Dual>& p) { return scale(batch_loss<Dual>(p, cfg, images, tokens), loss_scale); },
               params, v);
  });
}

void LanczosConfig::validate(std::size_t dim) const {
  if (k < 1 || k > iterations || iterations > dim) {
    throw std::invalid_argument("Lanczos needs 1 <= k <= iterations <= dim, got k=" + std::to_string(k) +
                                " iterations=" + std::to_string(iterations) + " dim=" + std::to_string(dim));
  }
  if (!(tolerance > 0.0)) throw std::invalid_argument("Lanczos tolerance must be positive");
}

std::vector<double> tridiagonal_eigen(std::vector<double> d, std::vector<double> e, std::vector<double>* vectors) {
  const auto n = static_cast<std::ptrdiff_t>(d.size());
  if (n == 0) return {};
  if (e.size() + 1 != d.size()) throw ShapeError("tridiagonal_eigen: off-diagonal must have n-1 entries");
  e.push_back(0.0);
  std::vector<double> z;
  if (vectors) {
    z.assign(static_cast<std::size_t>(n * n), 0.0);
    for (std::ptrdiff_t i = 0; i < n; ++i) z[static_cast<std::size_t>(i * n + i)] = 1.0;
  }
  const auto Z = [&](std::ptrdiff_t r, std::ptrdiff_t c) -> double& { return z[static_cast<std::size_t>(r * n + c)]; };
  const auto D = [&](std::ptrdiff_t i) -> double& { return d[static_cast<std::size_t>(i)]; };
  const auto E = [&](std::ptrdiff_t i) -> double& { return e[static_cast<std::size_t>(i)]; };

  for (std::ptrdiff_t l = 0; l < n; ++l) {
    int iter = 0;
    std::ptrdiff_t m;
    do {
      // Find a negligible off-diagonal element to split the matrix.
      for (m = l; m < n - 1; ++m) {
        const double dd = std::abs(D(m)) + std::abs(D(m + 1));
        if (std::abs(E(m)) <= DBL_EPSILON * dd) break;
      }
      if (m == l) break;
      if (++iter > 60) throw std::runtime_error("tridiagonal_eigen: no convergence");
      // Wilkinson shift from the leading 2×2 block.
      double g = (D(l + 1) - D(l)) / (2.0 * E(l));
      double r = std::hypot(g, 1.0);
      g = D(m) - D(l) + E(l) / (g + std::copysign(r, g));
      double s = 1.0, c = 1.0, p = 0.0;
      std::ptrdiff_t i;
      bool underflow = false;
      for (i = m - 1; i >= l; --i) {
        const double f = s * E(i), b = c * E(i);
        r = std::hypot(f, g);
        E(i + 1) = r;
        if (r == 0.0) {
          D(i + 1) -= p;
          E(m) = 0.0;
          underflow = true;
          break;
        }
        s = f / r;
        c = g / r;
        g = D(i + 1) - p;
        r = (D(i) - g) * s + 2.0 * c * b;
        p = s * r;
        D(i + 1) = g + p;
        g = c * r - b;
        if (vectors) {
          for (std::ptrdiff_t k = 0; k < n; ++k) {
            const double t = Z(k, i + 1);
            Z(k, i + 1) = s * Z(k, i) + c * t;
            Z(k, i) = c * Z(k, i) - s * t;
          }
        }
      }
      if (underflow) continue;
      D(l) -= p;
      E(l) = g;
      E(m) = 0.0;
    } while (true);
  }

  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d[a] < d[b]; });
  std::vector<double> sorted(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) sorted[i] = d[order[i]];
  if (vectors) {
    vectors->assign(z.size(), 0.0);
    for (std::size_t col = 0; col < order.size(); ++col)
      for (std::ptrdiff_t row = 0; row < n; ++row)
        (*vectors)[static_cast<std::size_t>(row * n) + col] = Z(row, static_cast<std::ptrdiff_t>(order[col]));
  }
  return sorted;
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// Two passes of classical Gram-Schmidt against the whole basis.
void orthogonalize(std::vector<double>& w, const std::vector<std::vector<double>>& basis) {
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto& q : basis) {
      const double c = dot(w, q);
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= c * q[i];
    }
  }
}

// Random unit vector orthogonal to the basis, or empty if none is found.
std::vector<double> fresh_direction(Rng& rng, std::size_t dim, const std::vector<std::vector<double>>& basis) {
  for (int attempt = 0; attempt < 5; ++attempt) {
    std::vector<double> v(dim);
    for (double& x : v) x = rng.normal();
    const double before = norm(v);
    orthogonalize(v, basis);
    const double after = norm(v);
    if (after > 1e-8 * before) {
      for (double& x : v) x /= after;
      return v;
    }
  }
  return {};
}

}  // namespace

LanczosResult lanczos_extreme_eigs(const HvpOracle& oracle, const LanczosConfig& cfg) {
  const std::size_t n = oracle.dim();
  cfg.validate(n);
  Rng rng(cfg.seed);
  std::vector<std::vector<double>> basis;
  basis.reserve(cfg.iterations);
  std::vector<double> alpha, beta;
  double beta_last = 0.0, scale = 0.0;
  LanczosResult result;

  std::vector<double> q = fresh_direction(rng, n, basis);
  while (!q.empty()) {
    basis.push_back(q);
    std::vector<double> w = oracle(q);
    const double a = dot(w, q);
    alpha.push_back(a);
    orthogonalize(w, basis);
    const double b = norm(w);
    scale = std::max({scale, std::abs(a), b});
    if (basis.size() == cfg.iterations || basis.size() == n) {
      beta_last = b;
      break;
    }
    if (b <= 1e-10 * std::max(scale, DBL_MIN)) {
      // Invariant subspace: continue in its orthogonal complement.
      beta.push_back(0.0);
      ++result.restarts;
      q = fresh_direction(rng, n, basis);
      if (q.empty()) beta.pop_back();
    } else {
      beta.push_back(b);
      for (double& x : w) x /= b;
      q = std::move(w);
    }
  }
  result.steps = basis.size();

  const std::size_t m = alpha.size();
  std::vector<double> vecs;
  const std::vector<double> theta = tridiagonal_eigen(alpha, beta, &vecs);
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (std::abs(theta[x]) != std::abs(theta[y])) return std::abs(theta[x]) > std::abs(theta[y]);
    return theta[x] > theta[y];
  });
  double max_abs = 0.0;
  for (double t : theta) max_abs = std::max(max_abs, std::abs(t));
  for (std::size_t r = 0; r < std::min(cfg.k, m); ++r) {
    const std::size_t i = order[r];
    const double residual = std::abs(beta_last * vecs[(m - 1) * m + i]);
    result.values.push_back({theta[i], residual, residual <= cfg.tolerance * std::max(max_abs, DBL_MIN)});
  }
  return result;
}

SpectrumReport spectrum_run(std::size_t batch_count, const std::function<HvpOracle(std::size_t)>& make_oracle,
                            const LanczosConfig& cfg, std::size_t batch_size, std::string model) {
  SpectrumReport report;
  report.model = std::move(model);
  report.batch_size = batch_size;
  report.sample_count = batch_count * batch_size;
  report.batches.reserve(batch_count);
  for (std::size_t b = 0; b < batch_count; ++b) {
    LanczosConfig c = cfg;
    c.seed = derive_seed(cfg.seed, b);
    report.batches.push_back(lanczos_extreme_eigs(make_oracle(b), c).values);
  }
  return report;
}

SpectrumReport hessian_spectrum_run(const ParamSet<double>& params, const ClipConfig& cfg, const PairedData& data,
                                    const HessianRunConfig& run, const std::string& model) {
  if (run.batch_size == 0) throw std::invalid_argument("hessian: batch_size must be positive");
  if (run.batch_size > data.size()) {
    throw std::invalid_argument("hessian: batch_size " + std::to_string(run.batch_size) + " exceeds the " +
                                std::to_string(data.size()) + " available pairs");
  }
  check_params_match(cfg, params);
  const std::size_t samples = std::min(run.num_samples, data.size());
  const std::size_t batches = samples / run.batch_size;
  if (batches == 0) throw std::invalid_argument("hessian: num_samples is smaller than one batch");
  SpectrumReport report = spectrum_run(
      batches,
      [&](std::size_t b) {
        std::vector<std::size_t> rows(run.batch_size);
        std::iota(rows.begin(), rows.end(), b * run.batch_size);
        std::vector<TokenSequence> tokens;
        for (std::size_t r : rows) tokens.push_back(data.tokens[r]);
        return HvpOracle::clip_batch(params, cfg, batch_rows<double>(data.images, rows), std::move(tokens),
                                     run.loss_scale);
      },
      run.lanczos, run.batch_size, model);
  report.sample_count = samples;
  return report;
}

SharpnessSummary summarize_sharpness(const SpectrumReport& report, std::size_t bins) {
  if (bins == 0) throw std::invalid_argument("summarize_sharpness: need at least one bin");
  std::vector<double> all;
  for (const auto& batch : report.batches)
    for (const auto& r : batch) all.push_back(r.value);
  if (all.empty()) throw std::invalid_argument("summarize_sharpness: report has no eigenvalues");

  SharpnessSummary s;
  s.total = all.size();
  for (double v : all) {
    if (v < 0.0) ++s.negative_count;
    s.max_abs_eigenvalue = std::max(s.max_abs_eigenvalue, std::abs(v));
  }
  s.negative_fraction = static_cast<double>(s.negative_count) / static_cast<double>(s.total);

  auto [lo_it, hi_it] = std::minmax_element(all.begin(), all.end());
  double lo = *lo_it, hi = *hi_it;
  if (lo == hi) lo -= 0.5, hi += 0.5;
  const double width = (hi - lo) / static_cast<double>(bins);
  s.histogram.resize(bins);
  for (std::size_t i = 0; i < bins; ++i) {
    s.histogram[i] = {lo + width * static_cast<double>(i), i + 1 == bins ? hi : lo + width * static_cast<double>(i + 1), 0};
  }
  for (double v : all) {
    auto i = static_cast<std::size_t>((v - lo) / width);
    ++s.histogram[std::min(i, bins - 1)].count;
  }
  return s;
}

void write_spectrum_csv(const std::filesystem::path& path, const SpectrumReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "batch_index,rank,eigenvalue,converged\n";
  for (std::size_t b = 0; b < report.batches.size(); ++b)
    for (std::size_t r = 0; r < report.batches[b].size(); ++r)
      out << b << ',' << r << ',' << report.batches[b][r].value << ',' << (report.batches[b][r].converged ? 1 : 0)
          << '\n';
}

void write_histogram_csv(const std::filesystem::path& path, const SharpnessSummary& summary) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "bin_low,bin_high,count\n";
  for (const auto& b : summary.histogram) out << b.low << ',' << b.high << ',' << b.count << '\n';
}

void write_sharpness_json(const std::filesystem::path& path, const SpectrumReport& report,
                          const SharpnessSummary& summary) {
  std::size_t converged = 0;
  for (const auto& batch : report.batches)
    for (const auto& r : batch) converged += r.converged ? 1 : 0;
  nlohmann::ordered_json j;
  j["model"] = report.model;
  j["batch_size"] = report.batch_size;
  j["sample_count"] = report.sample_count;
  j["batch_count"] = report.batch_count();
  j["eigenvalues"] = summary.total;
  j["converged"] = converged;
  j["negative_count"] = summary.negative_count;
  j["negative_fraction"] = summary.negative_fraction;
  j["max_abs_eigenvalue"] = summary.max_abs_eigenvalue;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace mambaclip
