#include "mambaclip/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "mambaclip/ops.hpp"

namespace mambaclip {

Precision parse_precision(std::string_view name) {
  if (name == "f64") return Precision::f64;
  if (name == "f32") return Precision::f32;
  throw std::invalid_argument("dtype must be 'f64' or 'f32', got '" + std::string(name) + "'");
}

std::string_view precision_name(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }

void TrainConfig::validate() const {
  model.validate();
  const auto bad = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (batch_size < 2) bad("batch_size must be at least 2");
  if (total_steps == 0) bad("total_steps must be positive");
  if (warmup_steps > total_steps) bad("warmup_steps exceeds total_steps");
  if (!(learning_rate >= 0.0)) bad("learning_rate must be non-negative");
  if (!(weight_decay >= 0.0)) bad("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) bad("betas must lie in [0, 1)");
  if (!(eps > 0.0)) bad("eps must be positive");
}

double learning_rate_at(const TrainConfig& cfg, std::size_t step) {
  if (step < cfg.warmup_steps) {
    return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  const std::size_t span = cfg.total_steps - cfg.warmup_steps;
  if (span == 0) return cfg.learning_rate;
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span));
  return 0.5 * cfg.learning_rate * (1.0 + std::cos(std::numbers::pi * progress));
}

bool is_decayed(std::string_view name, const Tensor<double>& t) { return name.ends_with(".weight") && t.rank() >= 2; }

AdamWState AdamWState::zeros_like(const ParamSet<double>& params) {
  AdamWState s;
  for (const auto& [name, t] : params) {
    s.m.add(name, Tensor<double>::zeros(t.shape()));
    s.v.add(name, Tensor<double>::zeros(t.shape()));
  }
  return s;
}

void adamw_update(ParamSet<double>& params, const ParamSet<double>& grads, AdamWState& state, const TrainConfig& cfg,
                  double lr) {
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  ParamSet<double> next;
  for (const auto& [name, p] : params) {
    const auto& g = grads[name];
    std::vector<double> m = state.m[name].to_vector();
    std::vector<double> v = state.v[name].to_vector();
    std::vector<double> w = p.to_vector();
    const double decay = is_decayed(name, p) ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps) + decay * w[i];
      w[i] -= lr * update;
    }
    state.m.set(name, Tensor<double>(p.shape(), std::move(m)));
    state.v.set(name, Tensor<double>(p.shape(), std::move(v)));
    next.add(name, Tensor<double>(p.shape(), std::move(w)));
  }
  params = std::move(next);
}

// ---- checkpoint file ---------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

template <class U>
void put(std::ostream& os, U value) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  os.write(reinterpret_cast<const char*>(&value), sizeof(U));
}

template <class U>
U get(std::istream& is, const char* what) {
  U value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(U));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(U))) {
    throw FormatError(std::string("checkpoint truncated while reading ") + what);
  }
  return value;
}

std::string get_bytes(std::istream& is, std::size_t n, const char* what) {
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n)) {
    throw FormatError(std::string("checkpoint truncated while reading ") + what);
  }
  return s;
}

void put_entry(std::ostream& os, const std::string& name, const Tensor<double>& t) {
  if (name.size() > UINT16_MAX) throw FormatError("tensor name too long: " + name);
  put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_ten1(os, t);
}

std::pair<std::string, Tensor<double>> get_entry(std::istream& is) {
  const auto len = get<std::uint16_t>(is, "entry name length");
  std::string name = get_bytes(is, len, "entry name");
  try {
    return {std::move(name), read_ten1_as<double>(is)};
  } catch (const FormatError& e) {
    throw FormatError("checkpoint entry '" + name + "': " + e.what());
  }
}

}  // namespace

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os.write(kCkptMagic, 4);
  put<std::uint32_t>(os, kCkptVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, t] : ckpt.params) put_entry(os, name, t);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.optimizer.m.size() + ckpt.optimizer.v.size()));
  for (const auto& [name, t] : ckpt.optimizer.m) put_entry(os, "m/" + name, t);
  for (const auto& [name, t] : ckpt.optimizer.v) put_entry(os, "v/" + name, t);
  put<std::uint64_t>(os, ckpt.optimizer.step);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.config_echo.size()));
  os.write(ckpt.config_echo.data(), static_cast<std::streamsize>(ckpt.config_echo.size()));
}

Checkpoint read_checkpoint(std::istream& is) {
  const std::string magic = get_bytes(is, 4, "magic");
  if (magic != std::string_view(kCkptMagic, 4)) throw FormatError("not a checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kCkptVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const auto count = get<std::uint32_t>(is, "entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = get_entry(is);
    if (ckpt.params.contains(name)) throw FormatError("duplicate checkpoint entry '" + name + "'");
    ckpt.params.add(std::move(name), std::move(t));
  }
  const auto opt_count = get<std::uint32_t>(is, "optimizer entry count");
  for (std::uint32_t i = 0; i < opt_count; ++i) {
    auto [name, t] = get_entry(is);
    const std::string base = name.size() > 2 ? name.substr(2) : "";
    auto& target = name.starts_with("m/") ? ckpt.optimizer.m : ckpt.optimizer.v;
    if ((!name.starts_with("m/") && !name.starts_with("v/")) || !ckpt.params.contains(base) ||
        target.contains(base) || ckpt.params[base].shape() != t.shape()) {
      throw FormatError("bad optimizer entry '" + name + "'");
    }
    target.add(base, std::move(t));
  }
  if (ckpt.optimizer.m.size() != ckpt.params.size() || ckpt.optimizer.v.size() != ckpt.params.size()) {
    if (!(ckpt.optimizer.m.empty() && ckpt.optimizer.v.empty())) {
      throw FormatError("optimizer moments do not cover every parameter");
    }
  }
  ckpt.optimizer.step = get<std::uint64_t>(is, "step counter");
  const auto echo_len = get<std::uint32_t>(is, "config length");
  ckpt.config_echo = get_bytes(is, echo_len, "config echo");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write checkpoint " + path.string());
  write_checkpoint(os, ckpt);
  if (!os) throw FormatError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  try {
    return read_checkpoint(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---- training ----------------------------------------------------------------

template <class T>
Tensor<T> batch_loss(const ParamSet<T>& params, const ClipConfig& cfg, const Tensor<T>& images,
                     std::span<const TokenSequence> tokens) {
  if (images.dim(0) != tokens.size()) {
    throw ShapeError("batch_loss: " + std::to_string(images.dim(0)) + " images but " + std::to_string(tokens.size()) +
                     " captions");
  }
  return clip_loss(encode_image(params, cfg, images), encode_text(params, cfg, tokens), params["logit_scale"]);
}

template Tensor<float> batch_loss<float>(const ParamSet<float>&, const ClipConfig&, const Tensor<float>&,
                                         std::span<const TokenSequence>);
template Tensor<double> batch_loss<double>(const ParamSet<double>&, const ClipConfig&, const Tensor<double>&,
                                           std::span<const TokenSequence>);
template Tensor<Dual> batch_loss<Dual>(const ParamSet<Dual>&, const ClipConfig&, const Tensor<Dual>&,
                                       std::span<const TokenSequence>);

namespace {

template <class T>
std::pair<double, ParamSet<double>> loss_and_gradients_as(const ParamSet<double>& params, const ClipConfig& cfg,
                                                          const Tensor<double>& images,
                                                          std::span<const TokenSequence> tokens) {
  Tape<T> tape;
  const ParamSet<T> watched = watch(tape, param_cast<T>(params));
  const Tensor<T> loss = batch_loss(watched, cfg, tensor_cast<T>(images), tokens);
  return {static_cast<double>(loss.item()), param_cast<double>(gradients(loss, watched))};
}

}  // namespace

std::pair<double, ParamSet<double>> loss_and_gradients(const ParamSet<double>& params, const ClipConfig& cfg,
                                                       const Tensor<double>& images,
                                                       std::span<const TokenSequence> tokens, Precision precision) {
  if (precision == Precision::f32) return loss_and_gradients_as<float>(params, cfg, images, tokens);
  return loss_and_gradients_as<double>(params, cfg, images, tokens);
}

PairedData PairedData::from_manifest(const DatasetManifest& manifest, const ClipConfig& cfg) {
  if (manifest.kind != ManifestKind::caption_pairs) throw ManifestError("training needs a caption-pairs manifest");
  PairedData d{load_image_batch(manifest.records, cfg.image_size), {}};
  for (const auto& r : manifest.records) d.tokens.push_back(tokenize(r.caption, cfg.context_len));
  return d;
}

double retrieval_top1(const ParamSet<double>& params, const ClipConfig& cfg, const PairedData& data) {
  const Tensor<double> img = encode_image(params, cfg, data.images);
  const Tensor<double> txt = encode_text(params, cfg, std::span<const TokenSequence>(data.tokens));
  const Tensor<double> sim = matmul(img, transpose(txt));
  const std::size_t n = data.size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j) {
      if (sim[i * n + j] > sim[i * n + best]) best = j;
    }
    correct += best == i;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

double full_batch_loss(const ParamSet<double>& params, const ClipConfig& cfg, const PairedData& data) {
  return batch_loss(params, cfg, data.images, std::span<const TokenSequence>(data.tokens)).item();
}

Trainer::Trainer(TrainConfig cfg, PairedData data)
    : cfg_(std::move(cfg)), data_(std::move(data)), params_(init_clip(cfg_.model, cfg_.seed)) {
  cfg_.validate();
  if (data_.size() < cfg_.batch_size) {
    throw std::invalid_argument("train config: batch_size " + std::to_string(cfg_.batch_size) + " exceeds the " +
                                std::to_string(data_.size()) + " training pairs");
  }
  state_ = AdamWState::zeros_like(params_);
}

Trainer::Trainer(TrainConfig cfg, PairedData data, Checkpoint resume) : Trainer(std::move(cfg), std::move(data)) {
  check_params_match(cfg_.model, resume.params);
  params_ = std::move(resume.params);
  if (resume.optimizer.m.empty()) {
    state_ = AdamWState::zeros_like(params_);
    state_.step = resume.optimizer.step;
  } else {
    state_ = std::move(resume.optimizer);
  }
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
  const std::size_t n = data_.size(), per_epoch = n / cfg_.batch_size;
  const std::size_t epoch = step / per_epoch, slot = step % per_epoch;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(cfg_.seed, 0xba7c, epoch));
  rng.shuffle(perm.begin(), perm.end());
  return {perm.begin() + static_cast<std::ptrdiff_t>(slot * cfg_.batch_size),
          perm.begin() + static_cast<std::ptrdiff_t>((slot + 1) * cfg_.batch_size)};
}

StepRecord Trainer::step() {
  const std::size_t s = current_step();
  const auto rows = batch_indices(s);
  std::vector<TokenSequence> tokens;
  tokens.reserve(rows.size());
  for (std::size_t r : rows) tokens.push_back(data_.tokens[r]);
  const Tensor<double> images = batch_rows<double>(data_.images, rows);
  auto [loss, grads] = loss_and_gradients(params_, cfg_.model, images, tokens, cfg_.precision);
  if (!std::isfinite(loss)) throw TrainingError("non-finite loss at step " + std::to_string(s));
  const double lr = learning_rate_at(cfg_, s);
  adamw_update(params_, grads, state_, cfg_, lr);
  return {s, loss, lr};
}

void Trainer::run(const std::function<void(const StepRecord&)>& on_step) {
  while (current_step() < cfg_.total_steps) {
    const StepRecord rec = step();
    if (on_step) on_step(rec);
  }
}

Checkpoint Trainer::checkpoint(std::string config_echo) const { return {params_, state_, std::move(config_echo)}; }

}  // namespace mambaclip
