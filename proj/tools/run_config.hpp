#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mambaclip/train.hpp"

// Run configuration: an INI file with sections, overridden by command-line
// values. Every key has a default; unknown sections or keys are errors.

namespace mambaclip::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  // [run]
  std::string command;
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  std::string model_id = "mambaclip";

  // [model] and [train]; train.seed mirrors `seed`.
  TrainConfig train;
  bool model_set = false;  // any [model] key given explicitly

  // [zeroshot]
  std::string dataset = "dataset";
  std::vector<std::string> templates;  // empty: built-in defaults
  std::size_t eval_batch = 32;

  // [ood]
  std::string ood_kind = "all";
  std::vector<double> ood_levels;  // empty: the kind's default ladder

  // [hessian]
  std::size_t hessian_batch_size = 15;
  std::size_t hessian_samples = 3000;
  std::size_t hessian_k = 5;
  std::size_t hessian_iterations = 40;
  double hessian_tolerance = 1e-8;
  double hessian_loss_scale = 1.0;
  std::size_t hessian_bins = 20;

  // [perturb]
  std::filesystem::path perturb_input;
  std::string perturb_kind = "rotation";
  double perturb_level = 90.0;

  // [summarize]
  std::filesystem::path table;

  // [synthetic]
  std::size_t synthetic_image_size = 32;
};

/// Sets `section.key` from its text form; throws ConfigError naming the key.
void set_value(RunConfig& cfg, const std::string& section, const std::string& key, const std::string& value);

/// Applies every key of an INI file.
void apply_ini_file(RunConfig& cfg, const std::filesystem::path& path);
/// Applies every key of INI text.
void apply_ini_text(RunConfig& cfg, const std::string& text);

/// Applies a "section.key=value" override.
void apply_override(RunConfig& cfg, const std::string& assignment);

/// Fully resolved configuration as INI text; applying it to a default
/// RunConfig reproduces `cfg`.
std::string echo(const RunConfig& cfg);

/// Throws ConfigError naming `key` when the path is empty.
const std::filesystem::path& require_path(const std::filesystem::path& p, const std::string& key);

}  // namespace mambaclip::cli
