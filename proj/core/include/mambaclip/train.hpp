#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "mambaclip/clip.hpp"
#include "mambaclip/ten1.hpp"

namespace mambaclip {

enum class Precision { f64, f32 };

Precision parse_precision(std::string_view name);
std::string_view precision_name(Precision p);

struct TrainConfig {
  ClipConfig model;
  std::size_t batch_size = 16;
  std::size_t total_steps = 300;
  std::size_t warmup_steps = 30;
  double learning_rate = 2e-3;
  double weight_decay = 0.2;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  std::uint64_t seed = 0;
  /// f32 runs the forward and backward passes in single precision; the
  /// parameters and optimizer moments stay f64.
  Precision precision = Precision::f64;

  void validate() const;
};

/// Linear warmup over warmup_steps to the base rate, then cosine decay to 0
/// at total_steps. `step` is 0-based.
double learning_rate_at(const TrainConfig& cfg, std::size_t step);

/// Weight decay applies to matrices named "*.weight" only.
bool is_decayed(std::string_view name, const Tensor<double>& t);

struct AdamWState {
  ParamSet<double> m;
  ParamSet<double> v;
  std::uint64_t step = 0;  // completed updates

  static AdamWState zeros_like(const ParamSet<double>& params);
};

/// One decoupled-weight-decay Adam update in place.
void adamw_update(ParamSet<double>& params, const ParamSet<double>& grads, AdamWState& state,
                  const TrainConfig& cfg, double lr);

struct Checkpoint {
  ParamSet<double> params;
  AdamWState optimizer;
  std::string config_echo;
};

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
/// Throws FormatError on bad magic/version or truncation; nothing is
/// returned unless the whole file parsed.
Checkpoint read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Contrastive loss of one batch of images and token sequences.
template <class T>
Tensor<T> batch_loss(const ParamSet<T>& params, const ClipConfig& cfg, const Tensor<T>& images,
                     std::span<const TokenSequence> tokens);

/// Loss and parameter gradients at the requested precision.
std::pair<double, ParamSet<double>> loss_and_gradients(const ParamSet<double>& params, const ClipConfig& cfg,
                                                       const Tensor<double>& images,
                                                       std::span<const TokenSequence> tokens, Precision precision);

struct StepRecord {
  std::size_t step;
  double loss;
  double learning_rate;
};

/// Image-text pairs loaded into memory: images [N, S, S, 3] and tokens.
struct PairedData {
  Tensor<double> images;
  std::vector<TokenSequence> tokens;

  static PairedData from_manifest(const DatasetManifest& manifest, const ClipConfig& cfg);
  std::size_t size() const { return tokens.size(); }
};

/// Fraction of images whose most similar caption (over the whole set) is
/// their own; ties resolve to the lowest index.
double retrieval_top1(const ParamSet<double>& params, const ClipConfig& cfg, const PairedData& data);

/// Contrastive loss with the whole set as one batch.
double full_batch_loss(const ParamSet<double>& params, const ClipConfig& cfg, const PairedData& data);

class Trainer {
 public:
  Trainer(TrainConfig cfg, PairedData data);
  /// Continues from a checkpoint; its parameters must match cfg.model.
  Trainer(TrainConfig cfg, PairedData data, Checkpoint resume);

  /// Batch rows for a 0-based step: each epoch is a seeded permutation split
  /// into floor(N / batch_size) batches.
  std::vector<std::size_t> batch_indices(std::size_t step) const;

  StepRecord step();
  /// Steps until total_steps, calling `on_step` after each.
  void run(const std::function<void(const StepRecord&)>& on_step = {});

  std::size_t current_step() const { return static_cast<std::size_t>(state_.step); }
  const ParamSet<double>& params() const { return params_; }
  const TrainConfig& config() const { return cfg_; }
  const PairedData& data() const { return data_; }
  Checkpoint checkpoint(std::string config_echo) const;

 private:
  TrainConfig cfg_;
  PairedData data_;
  ParamSet<double> params_;
  AdamWState state_;
};

}  // namespace mambaclip
