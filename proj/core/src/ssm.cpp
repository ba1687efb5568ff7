#include "mambaclip/ssm.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

#include "init_util.hpp"
#include "mambaclip/prefix_scan.hpp"

namespace mambaclip {
namespace {

template <class T>
T s_exp(const T& x) {
  using std::exp;
  return exp(x);
}

[[noreturn]] void scan_fail(const std::string& detail) { throw ShapeError("selective_scan: " + detail); }

struct ScanDims {
  std::size_t batch, length, channels, state;
};

template <class T>
ScanDims check_scan_shapes(const ScanSequence<T>& s, const Tensor<T>& a, const Tensor<T>& d) {
  if (s.x.rank() != 3) scan_fail("x must be [B, L, C], got " + shape_str(s.x.shape()));
  const ScanDims dims{s.x.dim(0), s.x.dim(1), s.x.dim(2), a.rank() == 2 ? a.dim(1) : 0};
  if (s.delta.shape() != s.x.shape()) {
    scan_fail("delta " + shape_str(s.delta.shape()) + " does not match x " + shape_str(s.x.shape()));
  }
  if (a.rank() != 2 || a.dim(0) != dims.channels) {
    scan_fail("A must be [" + std::to_string(dims.channels) + ", N], got " + shape_str(a.shape()));
  }
  const Shape bc{dims.batch, dims.length, dims.state};
  if (s.b.shape() != bc || s.c.shape() != bc) {
    scan_fail("B " + shape_str(s.b.shape()) + " / C " + shape_str(s.c.shape()) + " must be " + shape_str(bc));
  }
  if (d.shape() != Shape{dims.channels}) {
    scan_fail("D must be [" + std::to_string(dims.channels) + "], got " + shape_str(d.shape()));
  }
  return dims;
}

}  // namespace

DiscreteStep discretize(double delta, double a, double b) {
  if (!(delta > 0.0)) throw std::invalid_argument("discretize: step size must be positive, got " + std::to_string(delta));
  return {std::exp(delta * a), delta * b};
}

template <class T>
Tensor<T> selective_scan(const ScanSequence<T>& s, const Tensor<T>& a, const Tensor<T>& d, ScanMode mode) {
  const ScanDims dims = check_scan_shapes(s, a, d);
  const std::size_t B = dims.batch, L = dims.length, C = dims.channels, N = dims.state;
  const std::size_t CN = C * N;
  const auto xv = s.x.data();
  const auto dv = s.delta.data();
  const auto bv = s.b.data();
  const auto cv = s.c.data();
  const auto av = a.data();
  const auto skip = d.data();

  auto abar = std::make_shared<std::vector<T>>(B * L * CN);
  auto h = std::make_shared<std::vector<T>>(B * L * CN);
  auto& ab = *abar;
  auto& hv = *h;

  if (mode == ScanMode::sequential) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t row = b * L + t;
        for (std::size_t c = 0; c < C; ++c) {
          const T dt = dv[row * C + c];
          const T u = dt * xv[row * C + c];
          const std::size_t base = row * CN + c * N;
          for (std::size_t n = 0; n < N; ++n) {
            const T e = s_exp(dt * av[c * N + n]);
            ab[base + n] = e;
            const T prev = t == 0 ? T(0) : hv[base - CN + n];
            hv[base + n] = e * prev + u * bv[row * N + n];
          }
        }
      }
  } else {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t row = b * L + t;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t n = 0; n < N; ++n) ab[row * CN + c * N + n] = s_exp(dv[row * C + c] * av[c * N + n]);
      }
    std::vector<AffineStep<T>> lane(L);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t t = 0; t < L; ++t) {
            const std::size_t row = b * L + t;
            lane[t] = {ab[row * CN + c * N + n], dv[row * C + c] * xv[row * C + c] * bv[row * N + n]};
          }
          inclusive_scan_tree(std::span<AffineStep<T>>(lane), compose<T>);
          for (std::size_t t = 0; t < L; ++t) hv[(b * L + t) * CN + c * N + n] = lane[t].b;
        }
  }

  std::vector<T> y(B * L * C);
  for (std::size_t row = 0; row < B * L; ++row)
    for (std::size_t c = 0; c < C; ++c) {
      T acc = skip[c] * xv[row * C + c];
      const std::size_t base = row * CN + c * N;
      for (std::size_t n = 0; n < N; ++n) acc += cv[row * N + n] * hv[base + n];
      y[row * C + c] = acc;
    }

  return record_op<T>(
      Primitive::selective_scan, {&s.x, &s.delta, &s.b, &s.c, &a, &d}, Tensor<T>(s.x.shape(), std::move(y)),
      [s, a, d, abar, h, B, L, C, N, mode](std::span<const T> g, GradSink<T>& sink) {
        const std::size_t CN = C * N;
        const auto xv = s.x.data();
        const auto dv = s.delta.data();
        const auto bv = s.b.data();
        const auto cv = s.c.data();
        const auto av = a.data();
        const auto skip = d.data();
        const auto& ab = *abar;
        const auto& hv = *h;

        // Adjoint of the hidden state: gh_t = C_t·g_t + a_bar_{t+1}·gh_{t+1}.
        std::vector<T> gh(B * L * CN);
        if (mode == ScanMode::sequential) {
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = L; t-- > 0;) {
              const std::size_t row = b * L + t;
              for (std::size_t c = 0; c < C; ++c)
                for (std::size_t n = 0; n < N; ++n) {
                  const std::size_t k = row * CN + c * N + n;
                  T v = cv[row * N + n] * g[row * C + c];
                  if (t + 1 < L) v += ab[k + CN] * gh[k + CN];
                  gh[k] = v;
                }
            }
        } else {
          std::vector<AffineStep<T>> lane(L);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t j = 0; j < L; ++j) {
                  const std::size_t t = L - 1 - j;
                  const std::size_t row = b * L + t;
                  const T carry = t + 1 < L ? ab[(row + 1) * CN + c * N + n] : T(0);
                  lane[j] = {carry, cv[row * N + n] * g[row * C + c]};
                }
                inclusive_scan_tree(std::span<AffineStep<T>>(lane), compose<T>);
                for (std::size_t j = 0; j < L; ++j) gh[(b * L + (L - 1 - j)) * CN + c * N + n] = lane[j].b;
              }
        }

        auto gx = sink(0);
        auto gdelta = sink(1);
        auto gb = sink(2);
        auto gc = sink(3);
        auto ga = sink(4);
        auto gd = sink(5);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t t = 0; t < L; ++t) {
            const std::size_t row = b * L + t;
            for (std::size_t c = 0; c < C; ++c) {
              const T gy = g[row * C + c];
              const T x = xv[row * C + c];
              const T dt = dv[row * C + c];
              const std::size_t base = row * CN + c * N;
              T acc_x = skip[c] * gy;
              T acc_dt(0);
              for (std::size_t n = 0; n < N; ++n) {
                const T adj = gh[base + n];
                const T prev = t == 0 ? T(0) : hv[base - CN + n];
                const T bn = bv[row * N + n];
                const T da = adj * prev;   // d/d a_bar
                const T db = adj * x;      // d/d b_bar
                acc_x += adj * dt * bn;
                acc_dt += da * ab[base + n] * av[c * N + n] + db * bn;
                if (!gc.empty()) gc[row * N + n] += gy * hv[base + n];
                if (!gb.empty()) gb[row * N + n] += db * dt;
                if (!ga.empty()) ga[c * N + n] += da * ab[base + n] * dt;
              }
              if (!gx.empty()) gx[row * C + c] += acc_x;
              if (!gdelta.empty()) gdelta[row * C + c] += acc_dt;
              if (!gd.empty()) gd[c] += gy * x;
            }
          }
      });
}

template <class T>
SsmParams<T> SsmParams<T>::from(const ParamSet<T>& params, const std::string& prefix) {
  return {params[prefix + "a_log"],   params[prefix + "d_skip"], params[prefix + "dt_down"],
          params[prefix + "dt_proj"], params[prefix + "dt_bias"], params[prefix + "b_proj"],
          params[prefix + "c_proj"]};
}

template <class T>
Tensor<T> ssm_forward(const Tensor<T>& u, const SsmParams<T>& p, ScanMode mode) {
  const Tensor<T> delta = softplus(add(matmul(matmul(u, p.dt_down), p.dt_proj), p.dt_bias));
  const Tensor<T> a = neg(exp(p.a_log));
  return selective_scan(ScanSequence<T>{u, delta, matmul(u, p.b_proj), matmul(u, p.c_proj)}, a, p.d_skip, mode);
}

std::vector<std::size_t> cross_scan_order(std::size_t height, std::size_t width, int direction) {
  const std::size_t L = height * width;
  std::vector<std::size_t> order(L);
  for (std::size_t i = 0; i < L; ++i) {
    switch (direction) {
      case 0: order[i] = i; break;
      case 1: order[i] = L - 1 - i; break;
      case 2: order[i] = (i % height) * width + i / height; break;
      case 3: {
        const std::size_t j = L - 1 - i;
        order[i] = (j % height) * width + j / height;
        break;
      }
      default: throw std::invalid_argument("cross_scan_order: direction must be 0..3");
    }
  }
  return order;
}

template <class T>
Tensor<T> cross_scan_2d(const Tensor<T>& fmap, std::span<const SsmParams<T>, 4> params, ScanMode mode) {
  if (fmap.rank() != 4) throw ShapeError("cross_scan_2d: feature map must be [B, H, W, C], got " + shape_str(fmap.shape()));
  const std::size_t B = fmap.dim(0), H = fmap.dim(1), W = fmap.dim(2), C = fmap.dim(3);
  const Tensor<T> tokens = reshape(fmap, Shape{B, H * W, C});
  std::optional<Tensor<T>> total;
  for (int dir = 0; dir < 4; ++dir) {
    const auto order = cross_scan_order(H, W, dir);
    std::vector<std::size_t> inverse(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) inverse[order[i]] = i;
    const Tensor<T> scanned = ssm_forward(gather(tokens, 1, order), params[static_cast<std::size_t>(dir)], mode);
    const Tensor<T> back = gather(scanned, 1, inverse);
    total = total ? add(*total, back) : back;
  }
  return reshape(*total, Shape{B, H, W, C});
}

void MambaBlockConfig::validate() const {
  if (model_dim == 0 || inner_dim == 0 || state_dim == 0 || conv_width == 0 || dt_rank == 0) {
    throw std::invalid_argument("MambaBlockConfig: all sizes must be >= 1");
  }
}

template <class T>
MambaBlockWeights<T> MambaBlockWeights<T>::from(const ParamSet<T>& params, const std::string& prefix,
                                                const MambaBlockConfig& cfg) {
  MambaBlockWeights<T> w{params[prefix + "in_proj.weight"], params[prefix + "in_proj.bias"],
                         params[prefix + "conv.weight"],    params[prefix + "conv.bias"],
                         params[prefix + "out_proj.weight"], params[prefix + "out_proj.bias"],
                         {}};
  const int dirs = cfg.cross_scan_2d ? 4 : 1;
  for (int k = 0; k < dirs; ++k) w.ssm.push_back(SsmParams<T>::from(params, prefix + "ssm" + std::to_string(k) + "."));
  return w;
}

template <class T>
Tensor<T> mamba_block_forward(const Tensor<T>& x, const MambaBlockConfig& cfg, const MambaBlockWeights<T>& w,
                              std::optional<GridSize> grid, ScanMode mode) {
  if (x.rank() != 3 || x.dim(2) != cfg.model_dim) {
    throw ShapeError("mamba_block: input must be [B, L, " + std::to_string(cfg.model_dim) + "], got " +
                     shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), L = x.dim(1), I = cfg.inner_dim;
  if (w.in_weight.shape() != Shape{cfg.model_dim, 2 * I} || w.out_weight.shape() != Shape{I, cfg.model_dim} ||
      w.conv_weight.shape() != Shape{I, cfg.conv_width}) {
    throw ShapeError("mamba_block: weights do not match config (in_proj " + shape_str(w.in_weight.shape()) +
                     ", conv " + shape_str(w.conv_weight.shape()) + ", out_proj " + shape_str(w.out_weight.shape()) +
                     ")");
  }
  const Tensor<T> xz = add(matmul(x, w.in_weight), w.in_bias);
  const Tensor<T> u = silu(depthwise_conv1d(slice(xz, 2, 0, I), w.conv_weight, w.conv_bias));
  const Tensor<T> gate = silu(slice(xz, 2, I, I));
  Tensor<T> y;
  if (cfg.cross_scan_2d) {
    if (!grid || grid->height * grid->width != L || w.ssm.size() != 4) {
      throw ShapeError("mamba_block: cross-scan needs a grid matching sequence length " + std::to_string(L));
    }
    const Tensor<T> fmap = reshape(u, Shape{B, grid->height, grid->width, I});
    y = reshape(cross_scan_2d(fmap, std::span<const SsmParams<T>, 4>(w.ssm.data(), 4), mode), Shape{B, L, I});
  } else {
    y = ssm_forward(u, w.ssm.at(0), mode);
  }
  return add(x, add(matmul(mul(y, gate), w.out_weight), w.out_bias));
}

using detail::normal_tensor;
using detail::uniform_tensor;

void init_ssm_params(ParamSet<double>& params, const std::string& prefix, std::size_t channels, std::size_t state_dim,
                     std::size_t dt_rank, Rng& rng) {
  std::vector<double> a_log(channels * state_dim);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t n = 0; n < state_dim; ++n) a_log[c * state_dim + n] = std::log(static_cast<double>(n + 1));
  params.add(prefix + "a_log", Tensor<double>({channels, state_dim}, std::move(a_log)));
  params.add(prefix + "d_skip", Tensor<double>::full({channels}, 1.0));
  const double inv_c = 1.0 / std::sqrt(static_cast<double>(channels));
  const double inv_r = 1.0 / std::sqrt(static_cast<double>(dt_rank));
  params.add(prefix + "dt_down", normal_tensor(rng, {channels, dt_rank}, inv_c));
  params.add(prefix + "dt_proj", uniform_tensor(rng, {dt_rank, channels}, -inv_r, inv_r));
  // softplus(dt_bias) spread uniformly over [0.001, 0.1].
  std::vector<double> bias(channels);
  for (double& b : bias) {
    const double dt = rng.uniform(0.001, 0.1);
    b = dt + std::log(-std::expm1(-dt));
  }
  params.add(prefix + "dt_bias", Tensor<double>({channels}, std::move(bias)));
  params.add(prefix + "b_proj", normal_tensor(rng, {channels, state_dim}, inv_c));
  params.add(prefix + "c_proj", normal_tensor(rng, {channels, state_dim}, inv_c));
}

void init_mamba_block(ParamSet<double>& params, const std::string& prefix, const MambaBlockConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t D = cfg.model_dim, I = cfg.inner_dim, K = cfg.conv_width;
  params.add(prefix + "in_proj.weight", normal_tensor(rng, {D, 2 * I}, 1.0 / std::sqrt(static_cast<double>(D))));
  params.add(prefix + "in_proj.bias", Tensor<double>::zeros({2 * I}));
  const double ck = 1.0 / std::sqrt(static_cast<double>(K));
  params.add(prefix + "conv.weight", uniform_tensor(rng, {I, K}, -ck, ck));
  params.add(prefix + "conv.bias", Tensor<double>::zeros({I}));
  params.add(prefix + "out_proj.weight", normal_tensor(rng, {I, D}, 1.0 / std::sqrt(static_cast<double>(I))));
  params.add(prefix + "out_proj.bias", Tensor<double>::zeros({D}));
  const int dirs = cfg.cross_scan_2d ? 4 : 1;
  for (int k = 0; k < dirs; ++k) {
    init_ssm_params(params, prefix + "ssm" + std::to_string(k) + ".", I, cfg.state_dim, cfg.dt_rank, rng);
  }
}

#define MAMBACLIP_INSTANTIATE_SSM(T)                                                                              \
  template Tensor<T> selective_scan<T>(const ScanSequence<T>&, const Tensor<T>&, const Tensor<T>&, ScanMode);     \
  template struct SsmParams<T>;                                                                                   \
  template Tensor<T> ssm_forward<T>(const Tensor<T>&, const SsmParams<T>&, ScanMode);                             \
  template Tensor<T> cross_scan_2d<T>(const Tensor<T>&, std::span<const SsmParams<T>, 4>, ScanMode);              \
  template struct MambaBlockWeights<T>;                                                                           \
  template Tensor<T> mamba_block_forward<T>(const Tensor<T>&, const MambaBlockConfig&, const MambaBlockWeights<T>&, \
                                            std::optional<GridSize>, ScanMode);

MAMBACLIP_INSTANTIATE_SSM(float)
MAMBACLIP_INSTANTIATE_SSM(double)
MAMBACLIP_INSTANTIATE_SSM(Dual)

}  // namespace mambaclip
