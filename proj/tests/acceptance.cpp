// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include "mambaclip/hessian.hpp"
#include "mambaclip/ood.hpp"
#include "mambaclip/ssm.hpp"
#include "mambaclip/synthetic.hpp"
#include "mambaclip/ten1.hpp"
#include "mambaclip/zeroshot.hpp"
#include "support/test_util.hpp"

using namespace mambaclip;
using mambaclip::testing::gradcheck;
using mambaclip::testing::random_tensor;
using mambaclip::testing::rel_err;
using mambaclip::testing::TempDir;
using TD = Tensor<double>;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<TokenSequence> tokens_for(const std::vector<std::string>& texts) {
  std::vector<TokenSequence> out;
  for (const auto& t : texts) out.push_back(tokenize(t));
  return out;
}

// Every differentiable primitive, plus clip_loss and the full contrastive
// loss of a tiny model, against central differences.
Outcome gradcheck_suite() {
  Stopwatch clock;
  Rng rng(101);
  int cases = 0, failed = 0;
  double worst = 0.0;
  auto check = [&](const mambaclip::testing::TensorFn& f, std::vector<TD> inputs) {
    const double err = gradcheck(f, inputs, rng);
    worst = std::max(worst, err);
    failed += !(err <= 1e-5);
    ++cases;
  };
  auto rshape = [&] {
    Shape s(1 + rng.below(3));
    for (auto& d : s) d = 1 + rng.below(4);
    return s;
  };
  for (int rep = 0; rep < 4; ++rep) {
    const Shape s = rshape();
    const std::size_t m = 1 + rng.below(4), n = 1 + rng.below(4), k = 1 + rng.below(4);
    check([](const auto& in) { return matmul(in[0], in[1]); }, {random_tensor(rng, {2, m, k}), random_tensor(rng, {k, n})});
    check([](const auto& in) { return add(in[0], in[1]); }, {random_tensor(rng, s), random_tensor(rng, s)});
    check([](const auto& in) { return add(in[0], in[1]); }, {random_tensor(rng, s), random_tensor(rng, {s.back()})});
    check([](const auto& in) { return sub(in[0], in[1]); }, {random_tensor(rng, s), random_tensor(rng, s)});
    check([](const auto& in) { return mul(in[0], in[1]); }, {random_tensor(rng, s), random_tensor(rng, s)});
    check([](const auto& in) { return mul(in[0], in[1]); }, {random_tensor(rng, s), random_tensor(rng, {})});
    check([](const auto& in) { return div(in[0], in[1]); }, {random_tensor(rng, s), random_tensor(rng, s, 0.5, 2.0)});
    check([](const auto& in) { return exp(in[0]); }, {random_tensor(rng, s)});
    check([](const auto& in) { return log(in[0]); }, {random_tensor(rng, s, 0.2, 3.0)});
    check([](const auto& in) { return softplus(in[0]); }, {random_tensor(rng, s, -4, 4)});
    check([](const auto& in) { return silu(in[0]); }, {random_tensor(rng, s, -4, 4)});
    check([](const auto& in) { return tanh(in[0]); }, {random_tensor(rng, s, -2, 2)});
    check([](const auto& in) { return power(in[0], 2.5); }, {random_tensor(rng, s, 0.2, 2.0)});
    check([](const auto& in) { return sum(in[0]); }, {random_tensor(rng, s)});
    check([](const auto& in) { return sum(in[0], in[0].rank() - 1); }, {random_tensor(rng, s)});
    check([](const auto& in) { return mean(in[0]); }, {random_tensor(rng, s)});
    check([](const auto& in) { return mean(in[0], 0); }, {random_tensor(rng, s)});
    check([](const auto& in) { return max(in[0], in[0].rank() - 1); }, {random_tensor(rng, s)});
    check([](const auto& in) { return reshape(in[0], Shape{in[0].numel()}); }, {random_tensor(rng, s)});
    check(
        [](const auto& in) {
          const std::vector<std::size_t> perm{2, 0, 1};
          return transpose(in[0], std::span<const std::size_t>(perm));
        },
        {random_tensor(rng, {2, 3, 4})});
    check([](const auto& in) { return concat(std::span<const TD>(in), 1); },
          {random_tensor(rng, {2, 1, 3}), random_tensor(rng, {2, 3, 3})});
    check([](const auto& in) { return slice(in[0], 1, 1, 2); }, {random_tensor(rng, {2, 4, 3})});
    check([](const auto& in) { return softmax(in[0]); }, {random_tensor(rng, s, -3, 3)});
    check([](const auto& in) { return layernorm(in[0], in[1], in[2]); },
          {random_tensor(rng, {3, 5}), random_tensor(rng, {5}), random_tensor(rng, {5})});
    check(
        [](const auto& in) {
          const std::vector<std::size_t> ids{0, 3, 3, 1};
          return embedding(in[0], ids, Shape{2, 2});
        },
        {random_tensor(rng, {4, 3})});
    check([](const auto& in) { return depthwise_conv1d(in[0], in[1], in[2]); },
          {random_tensor(rng, {2, 5, 3}), random_tensor(rng, {3, 3}), random_tensor(rng, {3})});
    check([](const auto& in) { return l2_normalize(in[0]); }, {random_tensor(rng, {3, 4})});
    check(
        [](const auto& in) {
          const std::vector<std::size_t> t{2, 0, 1};
          return cross_entropy(in[0], t);
        },
        {random_tensor(rng, {3, 4}, -2, 2)});
    check(
        [](const auto& in) {
          const std::vector<std::size_t> idx{2, 0, 0, 1};
          return gather(in[0], 1, idx);
        },
        {random_tensor(rng, {2, 3, 2})});
    check([](const auto& in) { return space_to_depth(in[0], 2); }, {random_tensor(rng, {1, 4, 2, 3})});
    check([](const auto& in) { return clamp_max(in[0], 0.5); }, {random_tensor(rng, s)});
    check([](const auto& in) { return clip_loss(in[0], in[1], in[2]); },
          {random_tensor(rng, {4, 5}), random_tensor(rng, {4, 5}), random_tensor(rng, {}, 0.5, 2.5)});
  }

  // Composed loss through both encoders of a tiny model.
  ClipConfig cfg;
  cfg.image_size = 4;
  cfg.patch_size = 2;
  cfg.stage_depths = {1};
  cfg.stage_dims = {4};
  cfg.state_dim = 2;
  cfg.conv_width = 2;
  cfg.embed_dim = 6;
  cfg.text_dim = 6;
  cfg.text_depth = 1;
  const auto p = init_clip(cfg, 6);
  const TD imgs = random_tensor(rng, {3, 4, 4, 3}, 0.0, 1.0);
  const auto toks = tokens_for({"ab", "b", "ca"});
  std::vector<std::string> names;
  std::vector<TD> inputs;
  for (const auto& [name, t] : p) {
    names.push_back(name);
    inputs.push_back(t);
  }
  check(
      [&](const std::vector<TD>& in) {
        ParamSet<double> q;
        for (std::size_t i = 0; i < names.size(); ++i) q.add(names[i], in[i]);
        return batch_loss(q, cfg, imgs, std::span<const TokenSequence>(toks));
      },
      inputs);

  const double t = clock.seconds();
  return {cases >= 100 && failed == 0 && t < 60.0,
          fmt("%d cases, %d over 1e-5, worst rel err %.2e, %.1f s", cases, failed, worst, t)};
}

std::array<SsmParams<double>, 4> random_direction_params(Rng& rng, std::size_t C, std::size_t N) {
  std::array<SsmParams<double>, 4> out;
  for (auto& s : out) {
    ParamSet<double> p;
    init_ssm_params(p, "", C, N, 2, rng);
    s = SsmParams<double>::from(p, "");
    s.b_proj = random_tensor(rng, s.b_proj.shape());
    s.c_proj = random_tensor(rng, s.c_proj.shape());
    s.d_skip = random_tensor(rng, s.d_skip.shape());
  }
  return out;
}

// Visit order of direction k over an H×W grid, written out independently.
std::vector<std::size_t> visit_order(std::size_t H, std::size_t W, int k) {
  std::vector<std::size_t> v;
  if (k < 2) {
    for (std::size_t i = 0; i < H * W; ++i) v.push_back(i);
  } else {
    for (std::size_t c = 0; c < W; ++c)
      for (std::size_t r = 0; r < H; ++r) v.push_back(r * W + c);
  }
  if (k % 2 == 1) std::reverse(v.begin(), v.end());
  return v;
}

Outcome scan_equivalence() {
  Rng rng(202);
  double worst_scan = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t B = 1 + rng.below(2), L = 1 + rng.below(64), C = 1 + rng.below(3), N = 1 + rng.below(4);
    const ScanSequence<double> seq{random_tensor(rng, {B, L, C}), random_tensor(rng, {B, L, C}, 0.01, 1.0),
                                   random_tensor(rng, {B, L, N}), random_tensor(rng, {B, L, N})};
    const TD a = random_tensor(rng, {C, N}, -2.0, -0.1), d = random_tensor(rng, {C});
    worst_scan = std::max(worst_scan, rel_err(selective_scan_seq(seq, a, d).to_vector(),
                                              selective_scan_parallel(seq, a, d).to_vector()));
  }

  double worst_cross = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t B = 1 + rng.below(2), H = 1 + rng.below(5), W = 1 + rng.below(5), C = 3, L = H * W;
    const auto params = random_direction_params(rng, C, 4);
    const TD m = random_tensor(rng, {B, H, W, C});
    const ScanMode mode = rep % 2 ? ScanMode::parallel : ScanMode::sequential;
    const TD y = cross_scan_2d(m, std::span<const SsmParams<double>, 4>(params), mode);
    std::vector<double> expect(m.numel(), 0.0);
    for (int k = 0; k < 4; ++k) {
      const auto order = visit_order(H, W, k);
      std::vector<double> seq(B * L * C);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < L; ++i)
          for (std::size_t c = 0; c < C; ++c) seq[(b * L + i) * C + c] = m[(b * L + order[i]) * C + c];
      const TD out = ssm_forward(TD({B, L, C}, seq), params[static_cast<std::size_t>(k)], ScanMode::sequential);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < L; ++i)
          for (std::size_t c = 0; c < C; ++c) expect[(b * L + order[i]) * C + c] += out[(b * L + i) * C + c];
    }
    worst_cross = std::max(worst_cross, rel_err(y.to_vector(), expect));
  }
  return {worst_scan <= 1e-10 && worst_cross <= 1e-10,
          fmt("200 scans worst rel %.2e; 20 cross-scan maps worst rel %.2e", worst_scan, worst_cross)};
}

Outcome hvp_check() {
  TempDir dir("accept_hvp");
  const auto set = write_synthetic_dataset(dir.path(), 8);
  ClipConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.stage_depths = {1};
  cfg.stage_dims = {8};
  cfg.state_dim = 2;
  cfg.embed_dim = 8;
  cfg.text_dim = 8;
  cfg.text_depth = 1;
  const auto data = PairedData::from_manifest(load_manifest(set.captions, ManifestKind::caption_pairs), cfg);
  const auto params = init_clip(cfg, 3);
  const std::size_t dim = params.flat_dim();

  const std::vector<std::size_t> rows{0, 9, 18, 27, 36};
  std::vector<TokenSequence> tokens;
  for (std::size_t r : rows) tokens.push_back(data.tokens[r]);
  const TD images = batch_rows<double>(data.images, rows);
  const HvpOracle h = HvpOracle::clip_batch(params, cfg, images, tokens);

  Rng rng(303);
  std::vector<double> u(dim), v(dim);
  for (double& x : u) x = rng.normal();
  for (double& x : v) x = rng.normal();
  const auto hu = h(u), hv = h(v);
  const double uhv = dot(u, hv), vhu = dot(v, hu);
  const double sym = std::abs(uhv - vhu) / std::abs(uhv);

  const auto grad_at = [&](double eps) {
    auto flat = params.flatten();
    for (std::size_t i = 0; i < dim; ++i) flat[i] += eps * v[i];
    return value_and_gradient([&](const ParamSet<double>& p) { return batch_loss<double>(p, cfg, images, tokens); },
                              params.unflatten(flat))
        .second;
  };
  const double eps = 1e-5;
  const auto gp = grad_at(eps), gm = grad_at(-eps);
  std::vector<double> fd(dim);
  for (std::size_t i = 0; i < dim; ++i) fd[i] = (gp[i] - gm[i]) / (2 * eps);
  const double err = rel_err(hv, fd);
  return {dim <= 5000 && err <= 1e-4 && sym <= 1e-8,
          fmt("%zu params, FD rel err %.2e, symmetry rel %.2e", dim, err, sym)};
}

Outcome eigensolver_oracle() {
  Rng rng(404);
  double worst = 0.0;
  int unconverged = 0;
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 200;
    Eigen::MatrixXd g(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rng.normal();
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    Eigen::VectorXd lambda(n);
    for (std::size_t i = 0; i < n; ++i) {
      lambda(static_cast<Eigen::Index>(i)) =
          i < 5 ? (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(2.0, 10.0) : rng.uniform(-1.0, 1.0);
    }
    const Eigen::MatrixXd m = q * lambda.asDiagonal() * q.transpose();

    std::vector<double> flat(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) flat[i * n + j] = m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m).eigenvalues();
    std::vector<double> ref(ev.data(), ev.data() + ev.size());
    std::stable_sort(ref.begin(), ref.end(), [](double a, double b) { return std::abs(a) > std::abs(b); });

    const auto got = lanczos_extreme_eigs(HvpOracle::dense(n, flat), {5, 40, static_cast<std::uint64_t>(rep)});
    for (std::size_t i = 0; i < 5; ++i) {
      worst = std::max(worst, std::abs(got.values[i].value - ref[i]) / std::abs(ref[i]));
      unconverged += !got.values[i].converged;
    }
  }
  return {worst <= 1e-8, fmt("20 matrices 200x200, worst rel %.2e, %d unconverged Ritz values", worst, unconverged)};
}

Outcome hessian_protocol() {
  Stopwatch clock;
  TempDir dir("accept_hessian");
  ClipConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.stage_depths = {1};
  cfg.stage_dims = {16};
  cfg.state_dim = 4;
  cfg.embed_dim = 16;
  cfg.text_dim = 16;
  cfg.text_depth = 1;
  const auto set = write_synthetic_dataset(dir.path(), 16);
  const auto base = PairedData::from_manifest(load_manifest(set.captions, ManifestKind::caption_pairs), cfg);

  // 3000 pairs cycling through the 64 synthetic ones.
  const std::size_t samples = 3000, pixels = 16 * 16 * 3;
  std::vector<double> px(samples * pixels);
  PairedData data;
  for (std::size_t i = 0; i < samples; ++i) {
    const std::size_t src = i % base.size();
    std::copy_n(base.images.data().begin() + static_cast<std::ptrdiff_t>(src * pixels), pixels,
                px.begin() + static_cast<std::ptrdiff_t>(i * pixels));
    data.tokens.push_back(base.tokens[src]);
  }
  data.images = TD({samples, 16, 16, 3}, std::move(px));

  HessianRunConfig run;
  run.batch_size = 15;
  run.num_samples = 3000;
  run.lanczos = {5, 40, 0, 1e-8};
  const auto report = hessian_spectrum_run(init_clip(cfg, 0), cfg, data, run, "toy");
  bool shape_ok = report.batch_count() == 200;
  for (const auto& b : report.batches) shape_ok = shape_ok && b.size() == 5;
  const double t = clock.seconds();
  return {shape_ok && t < 600.0, fmt("%zu batches x %zu eigenvalues, %zu params, %.1f s", report.batch_count(),
                                     report.batches.empty() ? std::size_t{0} : report.batches.front().size(),
                                     init_clip(cfg, 0).flat_dim(), t)};
}

Outcome training_convergence() {
  TempDir dir("accept_train");
  const auto set = write_synthetic_dataset(dir.path(), 32);
  TrainConfig cfg;
  cfg.total_steps = 300;
  const auto data = PairedData::from_manifest(load_manifest(set.captions, ManifestKind::caption_pairs), cfg.model);

  auto train = [&](std::vector<double>& log, double& seconds) {
    Stopwatch clock;
    Trainer t(cfg, data);
    t.run([&](const StepRecord& r) { log.push_back(r.loss); });
    seconds = clock.seconds();
    return t.params();
  };
  std::vector<double> log_a, log_b;
  double sec_a = 0.0, sec_b = 0.0;
  const auto params = train(log_a, sec_a);
  train(log_b, sec_b);

  const double initial = full_batch_loss(init_clip(cfg.model, cfg.seed), cfg.model, data);
  const double final_loss = full_batch_loss(params, cfg.model, data);
  const double retrieval = retrieval_top1(params, cfg.model, data);

  const auto labeled = load_manifest(set.labeled, ManifestKind::labeled);
  const auto emb = clip_embedders(params, cfg.model);
  const auto classes = build_class_embeddings(emb.text, labeled.class_names(),
                                              PromptTemplateSet(synthetic_color_templates()));
  const double zs = evaluate_zeroshot(emb.image, emb.image_size, labeled, classes, "synthetic", "toy").top1();

  const bool same = log_a == log_b && log_a.size() == 300;
  return {final_loss < 0.2 * initial && retrieval >= 0.95 && zs >= 0.9 && same && sec_a < 300.0,
          fmt("loss %.4f -> %.4f (ratio %.3f), retrieval %.3f, zero-shot %.3f, logs %s, %.1f s per run", initial,
              final_loss, final_loss / initial, retrieval, zs, same ? "identical" : "differ", std::max(sec_a, sec_b))};
}

Outcome closed_form_losses() {
  const TD same = TD::full({4, 3}, 1.0 / std::sqrt(3.0));
  const double e1 = std::abs(clip_loss(same, same, TD::scalar(kInitLogitScale)).item() - std::log(4.0));
  const TD one({1, 2}, {0.6, 0.8}), other({1, 2}, {1.0, 0.0});
  const double e2 = std::abs(clip_loss(one, other, TD::scalar(kInitLogitScale)).item());
  std::vector<double> eye(16, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  const TD id({4, 4}, eye);
  const double e3 =
      std::abs(clip_loss(id, id, TD::scalar(std::log(10.0))).item() - std::log1p(3.0 * std::exp(-10.0)));
  return {e1 <= 1e-9 && e2 <= 1e-9 && e3 <= 1e-9,
          fmt("|L-ln4| %.1e, |L(B=1)| %.1e, |L-ln(1+3e^-10)| %.1e", e1, e2, e3)};
}

Outcome perturbation_identities() {
  Rng rng(808);
  bool contrast_id = true, rot_id = true, phase_id = true, gray_idem = true, bounded = true;
  double phase0 = 0.0, amp = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t h = 4 + rng.below(13), w = 4 + rng.below(13);
    const TD img = random_tensor(rng, {h, w, 3}, 0.0, 1.0);
    const auto seed = rng.next();

    contrast_id = contrast_id && apply_perturbation(img, {PerturbationKind::contrast, 1.0, {}}).to_vector() == img.to_vector();

    // rotation needs a square image to compose four times
    const TD sq = random_tensor(rng, {h, h, 3}, 0.0, 1.0);
    TD r = sq;
    for (int i = 0; i < 4; ++i) r = rotate(r, 90);
    rot_id = rot_id && r.to_vector() == sq.to_vector();

    phase0 = std::max(phase0, mambaclip::testing::max_abs_diff(phase_scramble(img, 0.0, seed).to_vector(), img.to_vector()));
    phase_id = phase0 <= 1e-6;

    const TD g = grayscale(img);
    gray_idem = gray_idem && grayscale(g).to_vector() == g.to_vector();

    for (double wlevel : {0.3, 1.0}) {
      amp = std::max(amp, rel_err(amplitude_spectrum(phase_scramble(img, wlevel, seed)).to_vector(),
                                  amplitude_spectrum(img).to_vector()));
    }

    for (PerturbationKind k : all_perturbation_kinds()) {
      for (double level : perturbation_ladder(k)) {
        const TD out = apply_perturbation(img.dim(0) == img.dim(1) || k != PerturbationKind::rotation ? img : sq,
                                          {k, level, seed});
        for (double v : out.data()) bounded = bounded && v >= 0.0 && v <= 1.0;
      }
    }
  }
  const bool amp_ok = amp <= 1e-6;
  return {contrast_id && rot_id && phase_id && gray_idem && amp_ok && bounded,
          fmt("contrast(1)=id %s, rotation^4=id %s, |phase(0)-id| %.1e, grayscale idempotent %s, amplitude rel %.1e, "
              "bounded %s",
              contrast_id ? "yes" : "no", rot_id ? "yes" : "no", phase0, gray_idem ? "yes" : "no", amp,
              bounded ? "yes" : "no")};
}

Outcome shape_bias_arithmetic() {
  std::vector<ImageRecord> records;
  std::vector<std::string> predicted;
  for (int i = 0; i < 100; ++i) {
    ImageRecord r;
    r.shape_category = "cat";
    r.texture_category = "elephant";
    records.push_back(r);
    predicted.push_back(i < 30 ? "cat" : i < 40 ? "elephant" : "truck");
  }
  const auto mixed = tally_shape_bias(predicted, records);
  std::fill(predicted.begin(), predicted.end(), "truck");
  const auto neither = tally_shape_bias(predicted, records);
  bool threw = false;
  try {
    (void)neither.shape_bias();
  } catch (const std::domain_error&) {
    threw = true;
  }
  const bool ok = mixed.defined() && mixed.shape_bias() == 0.75 && !neither.defined() && threw;
  return {ok, fmt("(30,10,60) -> %.17g; all-neither defined=%s", mixed.defined() ? mixed.shape_bias() : -1.0,
                  neither.defined() ? "true" : "false")};
}

Outcome table_summary() {
  const auto rows = summarize_table(AccuracyGrid::from_csv(fs::path(MAMBACLIP_TEST_DATA) / "table1.csv"));
  auto find = [&](const std::string& ds) -> const DatasetBest* {
    for (const auto& r : rows)
      if (r.dataset == ds) return &r;
    return nullptr;
  };
  auto is = [&](const std::string& ds, const std::string& model, double acc) {
    const auto* r = find(ds);
    return r && r->models == std::vector<std::string>{model} && r->best == acc;
  };
  const bool ok = is("ImageNet", "Simba_L", 41.6) && is("PCAM", "VMamba_B", 59.9) && is("EuroSAT", "ViT_B", 30.2);
  std::string detail;
  for (const char* ds : {"ImageNet", "PCAM", "EuroSAT"}) {
    const auto* r = find(ds);
    detail += std::string(detail.empty() ? "" : ", ") + ds + " " +
              (r ? (r->models.empty() ? "?" : r->models.front()) + fmt(" %.1f", r->best) : std::string("missing"));
  }
  return {ok, detail};
}

Outcome persistence() {
  TempDir dir("accept_persist");
  Rng rng(1111);
  bool ten1 = true;
  for (int rep = 0; rep < 5; ++rep) {
    const TD d = random_tensor(rng, {1 + rng.below(3), 1 + rng.below(5), 2});
    save_ten1(dir / "t.ten1", d);
    const auto back = load_ten1(dir / "t.ten1");
    ten1 = ten1 && std::holds_alternative<TD>(back) && std::get<TD>(back).to_vector() == d.to_vector() &&
           std::get<TD>(back).shape() == d.shape();
    const Tensor<float> f({3}, {1.5f, -0.0f, static_cast<float>(rng.normal())});
    save_ten1(dir / "f.ten1", f);
    const auto fb = load_ten1(dir / "f.ten1");
    ten1 = ten1 && std::get<Tensor<float>>(fb).to_vector() == f.to_vector();
  }

  const auto set = write_synthetic_dataset(dir / "syn", 8);
  TrainConfig cfg;
  cfg.model.image_size = 8;
  cfg.model.patch_size = 2;
  cfg.model.stage_depths = {1};
  cfg.model.stage_dims = {8};
  cfg.model.state_dim = 2;
  cfg.model.embed_dim = 8;
  cfg.model.text_dim = 8;
  cfg.model.text_depth = 1;
  cfg.batch_size = 8;
  cfg.total_steps = 20;
  cfg.warmup_steps = 3;
  const auto data = PairedData::from_manifest(load_manifest(set.captions, ManifestKind::caption_pairs), cfg.model);

  std::vector<double> full_losses;
  Trainer full(cfg, data);
  for (int i = 0; i < 15; ++i) full_losses.push_back(full.step().loss);
  Trainer first(cfg, data);
  for (int i = 0; i < 5; ++i) first.step();
  save_checkpoint(dir / "c.ckpt", first.checkpoint("echo"));

  std::ostringstream a, b;
  const Checkpoint loaded = load_checkpoint(dir / "c.ckpt");
  write_checkpoint(a, first.checkpoint("echo"));
  write_checkpoint(b, loaded);
  const bool ckpt = a.str() == b.str();

  Trainer resumed(cfg, data, loaded);
  bool same = resumed.current_step() == 5;
  for (int i = 0; i < 10; ++i) same = same && resumed.step().loss == full_losses[static_cast<std::size_t>(5 + i)];
  same = same && resumed.params().flatten() == full.params().flatten();
  return {ten1 && ckpt && same, fmt("TEN1 bit-exact %s, checkpoint bit-exact %s, 10 resumed steps identical %s",
                                    ten1 ? "yes" : "no", ckpt ? "yes" : "no", same ? "yes" : "no")};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradcheck suite", gradcheck_suite},
      {"scan equivalence", scan_equivalence},
      {"hessian-vector product", hvp_check},
      {"eigensolver oracle", eigensolver_oracle},
      {"hessian protocol shape", hessian_protocol},
      {"training convergence", training_convergence},
      {"closed-form losses", closed_form_losses},
      {"perturbation identities", perturbation_identities},
      {"shape-bias arithmetic", shape_bias_arithmetic},
      {"table summarization", table_summary},
      {"persistence", persistence},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  AC" << i + 1 << ' ' << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failures)) << '/' << criteria.size() << " criteria passed"
            << std::endl;
  return failures == 0 ? 0 : 1;
}
