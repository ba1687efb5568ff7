#include <benchmark/benchmark.h>

#include <array>

#include "mambaclip/autodiff.hpp"
#include "mambaclip/hessian.hpp"
#include "mambaclip/ops.hpp"
#include "mambaclip/ssm.hpp"
#include "mambaclip/synthetic.hpp"
#include "mambaclip/train.hpp"

using namespace mambaclip;
using TD = Tensor<double>;

namespace {

TD random(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return TD(std::move(shape), std::move(v));
}

ScanSequence<double> random_sequence(Rng& rng, std::size_t L, std::size_t C, std::size_t N) {
  return {random(rng, {1, L, C}), random(rng, {1, L, C}, 0.01, 1.0), random(rng, {1, L, N}), random(rng, {1, L, N})};
}

void BM_ScanSequential(benchmark::State& state) {
  Rng rng(1);
  const auto L = static_cast<std::size_t>(state.range(0));
  const auto seq = random_sequence(rng, L, 16, 8);
  const TD a = random(rng, {16, 8}, -2.0, -0.1), d = random(rng, {16});
  for (auto _ : state) benchmark::DoNotOptimize(selective_scan_seq(seq, a, d));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(L));
}
BENCHMARK(BM_ScanSequential)->RangeMultiplier(4)->Range(16, 1024);

void BM_ScanParallel(benchmark::State& state) {
  Rng rng(1);
  const auto L = static_cast<std::size_t>(state.range(0));
  const auto seq = random_sequence(rng, L, 16, 8);
  const TD a = random(rng, {16, 8}, -2.0, -0.1), d = random(rng, {16});
  for (auto _ : state) benchmark::DoNotOptimize(selective_scan_parallel(seq, a, d));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(L));
}
BENCHMARK(BM_ScanParallel)->RangeMultiplier(4)->Range(16, 1024);

void BM_CrossScan2d(benchmark::State& state) {
  Rng rng(2);
  const auto side = static_cast<std::size_t>(state.range(0));
  std::array<SsmParams<double>, 4> params;
  for (auto& s : params) {
    ParamSet<double> p;
    init_ssm_params(p, "", 16, 8, 2, rng);
    s = SsmParams<double>::from(p, "");
  }
  const TD m = random(rng, {1, side, side, 16});
  for (auto _ : state) {
    benchmark::DoNotOptimize(cross_scan_2d(m, std::span<const SsmParams<double>, 4>(params), ScanMode::sequential));
  }
}
BENCHMARK(BM_CrossScan2d)->Arg(4)->Arg(8)->Arg(16);

void BM_Matmul(benchmark::State& state) {
  Rng rng(3);
  const auto n = static_cast<std::size_t>(state.range(0));
  const TD a = random(rng, {n, n}), b = random(rng, {n, n});
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(32, 256);

PairedData synthetic_pairs(const ClipConfig& cfg) {
  DatasetManifest manifest;
  PairedData data;
  std::vector<double> px;
  for (std::size_t c = 0; c < kSyntheticColors.size(); ++c)
    for (std::size_t s = 0; s < kSyntheticShapes.size(); ++s) {
      const auto img = render_synthetic_image(c, s, cfg.image_size);
      for (std::uint8_t v : img.data()) px.push_back(v / 255.0);
      data.tokens.push_back(tokenize(synthetic_caption(c, s)));
    }
  data.images = TD({data.tokens.size(), cfg.image_size, cfg.image_size, 3}, std::move(px));
  return data;
}

void BM_TrainStep(benchmark::State& state) {
  TrainConfig cfg;
  cfg.precision = state.range(0) ? Precision::f32 : Precision::f64;
  cfg.total_steps = 1u << 30;
  Trainer trainer(cfg, synthetic_pairs(cfg.model));
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step());
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_HessianVectorProduct(benchmark::State& state) {
  ClipConfig cfg;
  cfg.image_size = 16;
  cfg.stage_depths = {1};
  cfg.stage_dims = {16};
  cfg.state_dim = 4;
  cfg.embed_dim = 16;
  cfg.text_dim = 16;
  cfg.text_depth = 1;
  const auto data = synthetic_pairs(cfg);
  std::vector<std::size_t> rows(15);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  const std::vector<TokenSequence> tokens(data.tokens.begin(), data.tokens.begin() + 15);
  const auto oracle = HvpOracle::clip_batch(init_clip(cfg, 0), cfg, batch_rows<double>(data.images, rows), tokens);
  Rng rng(4);
  std::vector<double> v(oracle.dim());
  for (double& x : v) x = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(oracle(v));
}
BENCHMARK(BM_HessianVectorProduct)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
