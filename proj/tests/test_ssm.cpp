#include <cmath>

#include "doctest.h"
#include "mambaclip/prefix_scan.hpp"
#include "mambaclip/ssm.hpp"
#include "support/test_util.hpp"

using namespace mambaclip;
using mambaclip::testing::gradcheck;
using mambaclip::testing::random_tensor;
using mambaclip::testing::rel_err;
using TD = Tensor<double>;

namespace {

// Straight recurrence on plain arrays; the ground truth for both scan forms.
std::vector<double> reference_scan(const ScanSequence<double>& s, const TD& a, const TD& d) {
  const std::size_t B = s.x.dim(0), L = s.x.dim(1), C = s.x.dim(2), N = a.dim(1);
  std::vector<double> y(B * L * C);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      std::vector<double> h(N, 0.0);
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t row = b * L + t;
        const double dt = s.delta[row * C + c];
        double out = d[c] * s.x[row * C + c];
        for (std::size_t n = 0; n < N; ++n) {
          const auto step = discretize(dt, a[c * N + n], s.b[row * N + n]);
          h[n] = step.a_bar * h[n] + step.b_bar * s.x[row * C + c];
          out += s.c[row * N + n] * h[n];
        }
        y[row * C + c] = out;
      }
    }
  return y;
}

struct RandomScan {
  ScanSequence<double> seq;
  TD a;
  TD d;
};

RandomScan random_scan(Rng& rng, std::size_t B, std::size_t L, std::size_t C, std::size_t N) {
  return {{random_tensor(rng, {B, L, C}), random_tensor(rng, {B, L, C}, 0.01, 1.0), random_tensor(rng, {B, L, N}),
           random_tensor(rng, {B, L, N})},
          random_tensor(rng, {C, N}, -2.0, -0.1),
          random_tensor(rng, {C})};
}

ParamSet<double> random_block_params(Rng& rng, const MambaBlockConfig& cfg) {
  ParamSet<double> p;
  init_mamba_block(p, "blk.", cfg, rng);
  // Non-zero biases and output weights so every path is exercised.
  ParamSet<double> q;
  for (const auto& [name, t] : p) {
    if (name.ends_with(".bias") || name.ends_with("out_proj.weight")) {
      q.add(name, random_tensor(rng, t.shape(), -0.5, 0.5));
    } else {
      q.add(name, t);
    }
  }
  return q;
}

}  // namespace

TEST_CASE("discretize") {
  const auto half = discretize(std::log(2.0), -1.0, 1.0);
  CHECK(half.a_bar == doctest::Approx(0.5).epsilon(1e-15));
  const auto tiny = discretize(1e-12, -1.0, 1.0);
  CHECK(std::abs(tiny.a_bar - 1.0) <= 1e-9);
  CHECK(std::abs(tiny.b_bar) <= 1e-9);
  const auto unit = discretize(1.0, -1.0, 1.0);
  CHECK(unit.a_bar == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
  CHECK(unit.b_bar == 1.0);
  CHECK_THROWS_AS((void)discretize(0.0, -1.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS((void)discretize(-0.5, -1.0, 1.0), std::invalid_argument);
}

TEST_CASE("sequential scan: hand-evaluated recurrence") {
  const TD a({1, 1}, {-1.0});
  const TD d0({1}, {0.0});
  ScanSequence<double> one{TD({1, 1, 1}, {2.0}), TD({1, 1, 1}, {1.0}), TD({1, 1, 1}, {1.0}), TD({1, 1, 1}, {1.0})};
  CHECK(selective_scan_seq(one, a, d0).item() == 2.0);

  ScanSequence<double> two{TD({1, 2, 1}, {2.0, 0.0}), TD({1, 2, 1}, {1.0, 1.0}), TD({1, 2, 1}, {1.0, 1.0}),
                           TD({1, 2, 1}, {1.0, 1.0})};
  const TD y = selective_scan_seq(two, a, d0);
  CHECK(y[0] == 2.0);
  CHECK(y[1] == doctest::Approx(2.0 * std::exp(-1.0)).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(0.7358).epsilon(1e-4));

  Rng rng(2);
  auto r = random_scan(rng, 2, 7, 3, 4);
  r.seq.b = TD::zeros(r.seq.b.shape());
  const TD skip = selective_scan_seq(r.seq, r.a, TD::full({3}, 1.0));
  for (std::size_t i = 0; i < skip.numel(); ++i) CHECK(skip[i] == r.seq.x[i]);
}

TEST_CASE("scan rejects mismatched lengths") {
  Rng rng(3);
  auto r = random_scan(rng, 1, 5, 2, 3);
  r.seq.delta = random_tensor(rng, {1, 4, 2}, 0.1, 1.0);
  CHECK_THROWS_AS((void)selective_scan_seq(r.seq, r.a, r.d), ShapeError);
  auto s = random_scan(rng, 1, 5, 2, 3);
  s.seq.c = random_tensor(rng, {1, 6, 3});
  CHECK_THROWS_AS((void)selective_scan_parallel(s.seq, s.a, s.d), ShapeError);
}

TEST_CASE("tree prefix scan matches a left fold") {
  Rng rng(4);
  for (std::size_t n = 1; n <= 70; ++n) {
    std::vector<AffineStep<double>> xs(n);
    for (auto& e : xs) e = {rng.uniform(0.1, 1.0), rng.uniform(-1, 1)};
    std::vector<AffineStep<double>> fold = xs;
    for (std::size_t i = 1; i < n; ++i) fold[i] = compose(fold[i - 1], fold[i]);
    inclusive_scan_tree(std::span<AffineStep<double>>(xs), compose<double>);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(xs[i].a == doctest::Approx(fold[i].a).epsilon(1e-12));
      CHECK(xs[i].b == doctest::Approx(fold[i].b).epsilon(1e-12));
    }
  }
}

TEST_CASE("parallel scan: prefix-sum degeneracy and single step") {
  // a_bar = 1 (A = 0), b_bar·x = c  ->  h_t = t·c.
  const std::size_t L = 9;
  const double c = 0.75;
  ScanSequence<double> s{TD::full({1, L, 1}, c), TD::full({1, L, 1}, 1.0), TD::full({1, L, 1}, 1.0),
                         TD::full({1, L, 1}, 1.0)};
  const TD y = selective_scan_parallel(s, TD({1, 1}, {0.0}), TD({1}, {0.0}));
  for (std::size_t t = 0; t < L; ++t) CHECK(y[t] == doctest::Approx(static_cast<double>(t + 1) * c).epsilon(1e-15));

  Rng rng(5);
  const auto r = random_scan(rng, 3, 1, 4, 2);
  CHECK(selective_scan_parallel(r.seq, r.a, r.d).to_vector() == selective_scan_seq(r.seq, r.a, r.d).to_vector());
}

TEST_CASE("parallel and sequential scans agree (f64 and f32)") {
  Rng rng(6);
  double worst = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t L = 1 + rng.below(64);
    const auto r = random_scan(rng, 1 + rng.below(2), L, 1 + rng.below(3), 1 + rng.below(4));
    const TD seq = selective_scan_seq(r.seq, r.a, r.d);
    const TD par = selective_scan_parallel(r.seq, r.a, r.d);
    const auto ref = reference_scan(r.seq, r.a, r.d);
    worst = std::max(worst, rel_err(seq.to_vector(), par.to_vector()));
    CHECK(rel_err(seq.to_vector(), ref) <= 1e-12);
  }
  CHECK(worst <= 1e-10);

  for (int rep = 0; rep < 20; ++rep) {
    const auto r = random_scan(rng, 1, 1 + rng.below(64), 3, 4);
    const ScanSequence<float> sf{tensor_cast<float>(r.seq.x), tensor_cast<float>(r.seq.delta),
                                 tensor_cast<float>(r.seq.b), tensor_cast<float>(r.seq.c)};
    const auto seq = tensor_cast<double>(selective_scan_seq(sf, tensor_cast<float>(r.a), tensor_cast<float>(r.d)));
    const auto par =
        tensor_cast<double>(selective_scan_parallel(sf, tensor_cast<float>(r.a), tensor_cast<float>(r.d)));
    CHECK(rel_err(seq.to_vector(), par.to_vector()) <= 1e-4);
  }
}

TEST_CASE("scan gradients: finite differences and cross-form agreement") {
  Rng rng(8);
  for (int rep = 0; rep < 6; ++rep) {
    const auto r = random_scan(rng, 2, 1 + rng.below(10), 2, 3);
    const std::vector<TD> inputs{r.seq.x, r.seq.delta, r.seq.b, r.seq.c, r.a, r.d};
    for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel}) {
      const auto f = [mode](const std::vector<TD>& in) {
        return selective_scan(ScanSequence<double>{in[0], in[1], in[2], in[3]}, in[4], in[5], mode);
      };
      CHECK(gradcheck(f, inputs, rng) <= 1e-5);
    }
    // Same weights, both forms: gradients agree to 1e-8.
    const TD w = random_tensor(rng, r.seq.x.shape());
    std::vector<std::vector<double>> flat(2);
    for (int m = 0; m < 2; ++m) {
      Tape<double> tape;
      std::vector<TD> in;
      for (const auto& t : inputs) in.push_back(tape.watch(t));
      const TD y = selective_scan(ScanSequence<double>{in[0], in[1], in[2], in[3]}, in[4], in[5],
                                  m == 0 ? ScanMode::sequential : ScanMode::parallel);
      const auto g = tape.backward(sum(mul(y, w)));
      for (const auto& t : in) flat[m].insert(flat[m].end(), g[*t.tape_id()].begin(), g[*t.tape_id()].end());
    }
    CHECK(rel_err(flat[0], flat[1]) <= 1e-8);
  }
}

TEST_CASE("hidden state stays within the geometric bound for long sequences") {
  // With C one-hot and D = 0 the output is a single hidden-state coordinate.
  Rng rng(10);
  const std::size_t L = 100000, N = 2;
  const TD a({1, N}, {-0.5, -0.05});
  std::vector<double> x(L), dt(L), bm(L * N), cm(L * N, 0.0);
  double max_bbar = 0.0, max_abar = 0.0;
  for (std::size_t t = 0; t < L; ++t) {
    x[t] = rng.uniform(-1, 1);
    dt[t] = rng.uniform(0.01, 0.5);
    for (std::size_t n = 0; n < N; ++n) {
      bm[t * N + n] = rng.uniform(-1, 1);
      max_bbar = std::max(max_bbar, std::abs(dt[t] * bm[t * N + n]));
      max_abar = std::max(max_abar, std::exp(dt[t] * a[n]));
    }
  }
  const double bound = max_bbar / (1.0 - max_abar);
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> c = cm;
    for (std::size_t t = 0; t < L; ++t) c[t * N + n] = 1.0;
    const ScanSequence<double> s{TD({1, L, 1}, x), TD({1, L, 1}, dt), TD({1, L, N}, bm), TD({1, L, N}, c)};
    const TD h = selective_scan_seq(s, a, TD({1}, {0.0}));
    double peak = 0.0;
    for (double v : h.data()) {
      REQUIRE(std::isfinite(v));
      peak = std::max(peak, std::abs(v));
    }
    CHECK(peak <= bound);
  }
}

TEST_CASE("cross-scan traversal orders") {
  CHECK(cross_scan_order(2, 3, 0) == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});
  CHECK(cross_scan_order(2, 3, 1) == std::vector<std::size_t>{5, 4, 3, 2, 1, 0});
  CHECK(cross_scan_order(2, 3, 2) == std::vector<std::size_t>{0, 3, 1, 4, 2, 5});
  CHECK(cross_scan_order(2, 3, 3) == std::vector<std::size_t>{5, 2, 4, 1, 3, 0});
}

namespace {

std::array<SsmParams<double>, 4> random_direction_params(Rng& rng, std::size_t C, std::size_t N) {
  std::array<SsmParams<double>, 4> out;
  for (int k = 0; k < 4; ++k) {
    ParamSet<double> p;
    init_ssm_params(p, "", C, N, 2, rng);
    SsmParams<double> s = SsmParams<double>::from(p, "");
    s.b_proj = random_tensor(rng, s.b_proj.shape());
    s.c_proj = random_tensor(rng, s.c_proj.shape());
    s.d_skip = random_tensor(rng, s.d_skip.shape());
    out[static_cast<std::size_t>(k)] = s;
  }
  return out;
}

TD transpose_hw(const TD& m) {
  const std::vector<std::size_t> perm{0, 2, 1, 3};
  return transpose(m, std::span<const std::size_t>(perm));
}

}  // namespace

TEST_CASE("cross_scan_2d: degenerate grid, transpose symmetry, permutation oracle") {
  Rng rng(12);
  const std::size_t C = 3, N = 4;
  const auto params = random_direction_params(rng, C, N);

  SUBCASE("1x1 map with shared parameters is four single-step scans") {
    const std::array<SsmParams<double>, 4> shared{params[0], params[0], params[0], params[0]};
    const TD m = random_tensor(rng, {2, 1, 1, C});
    const TD y = cross_scan_2d(m, std::span<const SsmParams<double>, 4>(shared), ScanMode::sequential);
    const TD single = ssm_forward(reshape(m, Shape{2, 1, C}), params[0], ScanMode::sequential);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(4.0 * single[i]).epsilon(1e-14));
  }

  SUBCASE("transposed input with swapped row/column parameters transposes the output") {
    const TD m = random_tensor(rng, {1, 3, 4, C});
    const TD y = cross_scan_2d(m, std::span<const SsmParams<double>, 4>(params), ScanMode::sequential);
    const std::array<SsmParams<double>, 4> swapped{params[2], params[3], params[0], params[1]};
    const TD yt =
        cross_scan_2d(transpose_hw(m), std::span<const SsmParams<double>, 4>(swapped), ScanMode::sequential);
    CHECK(rel_err(transpose_hw(y).to_vector(), yt.to_vector()) <= 1e-12);
  }

  SUBCASE("3x3 map against explicit permute-scan-unpermute-sum") {
    const std::size_t H = 3, W = 3, L = H * W;
    const TD m = random_tensor(rng, {2, H, W, C});
    const TD y = cross_scan_2d(m, std::span<const SsmParams<double>, 4>(params), ScanMode::parallel);
    // Visiting sequences written out by hand for a 3x3 grid.
    const std::vector<std::vector<std::size_t>> visits{
        {0, 1, 2, 3, 4, 5, 6, 7, 8}, {8, 7, 6, 5, 4, 3, 2, 1, 0}, {0, 3, 6, 1, 4, 7, 2, 5, 8}, {8, 5, 2, 7, 4, 1, 6, 3, 0}};
    std::vector<double> expect(m.numel(), 0.0);
    for (std::size_t k = 0; k < 4; ++k) {
      std::vector<double> seq(2 * L * C);
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < L; ++i)
          for (std::size_t c = 0; c < C; ++c) seq[(b * L + i) * C + c] = m[(b * L + visits[k][i]) * C + c];
      const TD out = ssm_forward(TD({2, L, C}, seq), params[k], ScanMode::sequential);
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < L; ++i)
          for (std::size_t c = 0; c < C; ++c) expect[(b * L + visits[k][i]) * C + c] += out[(b * L + i) * C + c];
    }
    CHECK(rel_err(y.to_vector(), expect) <= 1e-10);
  }

  SUBCASE("three zeroed directions reduce to a single-direction scan") {
    auto zeroed = params;
    for (std::size_t k = 1; k < 4; ++k) {
      zeroed[k].c_proj = TD::zeros(zeroed[k].c_proj.shape());
      zeroed[k].d_skip = TD::zeros(zeroed[k].d_skip.shape());
    }
    const TD m = random_tensor(rng, {1, 2, 5, C});
    const TD y = cross_scan_2d(m, std::span<const SsmParams<double>, 4>(zeroed), ScanMode::sequential);
    const TD single = ssm_forward(reshape(m, Shape{1, 10, C}), params[0], ScanMode::sequential);
    CHECK(rel_err(y.to_vector(), single.to_vector()) <= 1e-14);
  }

  CHECK_THROWS_AS((void)cross_scan_2d(random_tensor(rng, {3, C}), std::span<const SsmParams<double>, 4>(params),
                                      ScanMode::sequential),
                  ShapeError);
}

namespace {

double silu_ref(double v) { return v / (1.0 + std::exp(-v)); }
double softplus_ref(double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

// Scalar-loop Mamba block (1D) written independently of the tensor ops.
std::vector<double> reference_block(const TD& x, const MambaBlockConfig& cfg, const ParamSet<double>& p) {
  const std::size_t B = x.dim(0), L = x.dim(1), D = cfg.model_dim, I = cfg.inner_dim, N = cfg.state_dim,
                    K = cfg.conv_width, R = cfg.dt_rank;
  const auto& win = p["blk.in_proj.weight"];
  const auto& bin = p["blk.in_proj.bias"];
  const auto& wc = p["blk.conv.weight"];
  const auto& bc = p["blk.conv.bias"];
  const auto& wout = p["blk.out_proj.weight"];
  const auto& bout = p["blk.out_proj.bias"];
  const auto& alog = p["blk.ssm0.a_log"];
  const auto& dsk = p["blk.ssm0.d_skip"];
  const auto& dtd = p["blk.ssm0.dt_down"];
  const auto& dtp = p["blk.ssm0.dt_proj"];
  const auto& dtb = p["blk.ssm0.dt_bias"];
  const auto& bp = p["blk.ssm0.b_proj"];
  const auto& cp = p["blk.ssm0.c_proj"];
  std::vector<double> out(B * L * D);
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> main(L * I), gate(L * I);
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t j = 0; j < 2 * I; ++j) {
        double v = bin[j];
        for (std::size_t k = 0; k < D; ++k) v += x[(b * L + t) * D + k] * win[k * 2 * I + j];
        if (j < I) main[t * I + j] = v;
        else gate[t * I + j - I] = silu_ref(v);
      }
    std::vector<double> u(L * I);
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t c = 0; c < I; ++c) {
        double v = bc[c];
        for (std::size_t k = 0; k < K; ++k) {
          const long s = static_cast<long>(t) - static_cast<long>(K - 1) + static_cast<long>(k);
          if (s >= 0) v += wc[c * K + k] * main[static_cast<std::size_t>(s) * I + c];
        }
        u[t * I + c] = silu_ref(v);
      }
    std::vector<double> h(I * N, 0.0);
    for (std::size_t t = 0; t < L; ++t) {
      std::vector<double> low(R, 0.0), bt(N, 0.0), ct(N, 0.0);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < I; ++c) low[r] += u[t * I + c] * dtd[c * R + r];
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < I; ++c) {
          bt[n] += u[t * I + c] * bp[c * N + n];
          ct[n] += u[t * I + c] * cp[c * N + n];
        }
      std::vector<double> y(I);
      for (std::size_t c = 0; c < I; ++c) {
        double pre = dtb[c];
        for (std::size_t r = 0; r < R; ++r) pre += low[r] * dtp[r * I + c];
        const double dt = softplus_ref(pre);
        double acc = dsk[c] * u[t * I + c];
        for (std::size_t n = 0; n < N; ++n) {
          const auto step = discretize(dt, -std::exp(alog[c * N + n]), bt[n]);
          h[c * N + n] = step.a_bar * h[c * N + n] + step.b_bar * u[t * I + c];
          acc += ct[n] * h[c * N + n];
        }
        y[c] = acc * gate[t * I + c];
      }
      for (std::size_t j = 0; j < D; ++j) {
        double v = bout[j] + x[(b * L + t) * D + j];
        for (std::size_t c = 0; c < I; ++c) v += y[c] * wout[c * D + j];
        out[(b * L + t) * D + j] = v;
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("mamba block") {
  Rng rng(14);
  const MambaBlockConfig cfg{4, 8, 3, 3, 2, false};

  SUBCASE("all-zero weights leave the residual only") {
    ParamSet<double> p;
    init_mamba_block(p, "blk.", cfg, rng);
    ParamSet<double> zero;
    for (const auto& [name, t] : p) zero.add(name, TD::zeros(t.shape()));
    const TD x = random_tensor(rng, {2, 6, 4});
    const TD y = mamba_block_forward(x, cfg, MambaBlockWeights<double>::from(zero, "blk.", cfg), std::nullopt,
                                     ScanMode::sequential);
    CHECK(y.to_vector() == x.to_vector());
  }

  SUBCASE("causality") {
    const ParamSet<double> p = random_block_params(rng, cfg);
    const auto w = MambaBlockWeights<double>::from(p, "blk.", cfg);
    const TD x = random_tensor(rng, {1, 8, 4});
    const TD y = mamba_block_forward(x, cfg, w, std::nullopt, ScanMode::sequential);
    for (std::size_t t = 0; t < 8; ++t) {
      std::vector<double> xv = x.to_vector();
      for (std::size_t j = 0; j < 4; ++j) xv[t * 4 + j] += 0.5;
      const TD y2 = mamba_block_forward(TD(x.shape(), xv), cfg, w, std::nullopt, ScanMode::sequential);
      for (std::size_t s = 0; s < t * 4; ++s) CHECK(y2[s] == y[s]);
      bool changed = false;
      for (std::size_t s = t * 4; s < t * 4 + 4; ++s) changed |= y2[s] != y[s];
      CHECK(changed);
    }
  }

  SUBCASE("matches a scalar-loop reference composition") {
    const ParamSet<double> p = random_block_params(rng, cfg);
    const TD x = random_tensor(rng, {2, 8, 4});
    for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel}) {
      const TD y = mamba_block_forward(x, cfg, MambaBlockWeights<double>::from(p, "blk.", cfg), std::nullopt, mode);
      const auto ref = reference_block(x, cfg, p);
      CHECK(mambaclip::testing::max_abs_diff(y.to_vector(), ref) <= 1e-12);
    }
  }

  SUBCASE("parameter gradients match finite differences (1D and cross-scan)") {
    for (bool cross : {false, true}) {
      MambaBlockConfig c = cfg;
      c.cross_scan_2d = cross;
      const ParamSet<double> p = random_block_params(rng, c);
      const TD x = random_tensor(rng, {1, 6, 4});
      std::vector<std::string> names;
      std::vector<TD> inputs;
      for (const auto& [name, t] : p) {
        names.push_back(name);
        inputs.push_back(t);
      }
      const auto f = [&](const std::vector<TD>& in) {
        ParamSet<double> q;
        for (std::size_t i = 0; i < names.size(); ++i) q.add(names[i], in[i]);
        return mamba_block_forward(x, c, MambaBlockWeights<double>::from(q, "blk.", c),
                                   cross ? std::optional<GridSize>(GridSize{2, 3}) : std::nullopt,
                                   ScanMode::sequential);
      };
      CHECK(gradcheck(f, inputs, rng) <= 1e-5);
    }
  }

  SUBCASE("shape mismatch is rejected") {
    const ParamSet<double> p = random_block_params(rng, cfg);
    const auto w = MambaBlockWeights<double>::from(p, "blk.", cfg);
    CHECK_THROWS_AS((void)mamba_block_forward(random_tensor(rng, {1, 5, 3}), cfg, w, std::nullopt, ScanMode::sequential),
                    ShapeError);
    MambaBlockConfig wrong = cfg;
    wrong.inner_dim = 6;
    CHECK_THROWS_AS(
        (void)mamba_block_forward(random_tensor(rng, {1, 5, 4}), wrong, w, std::nullopt, ScanMode::sequential),
        ShapeError);
  }
}
