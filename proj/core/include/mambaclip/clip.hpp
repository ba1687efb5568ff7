#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mambaclip/autodiff.hpp"
#include "mambaclip/data.hpp"
#include "mambaclip/ssm.hpp"

// Dual-encoder model: a cross-scan Mamba vision tower and a causal text
// tower, both ending in an L2-normalized projection to embed_dim.
//
// Vision: 4×4 patchify -> stages of 2D cross-scan blocks, 2× downsampling
// (space-to-depth + linear) between stages -> layernorm -> mean pool -> proj.
// Text: byte embedding -> 1D Mamba blocks (or the attention-free MLP tower)
// -> layernorm -> state at the EOS position -> proj.

namespace mambaclip {

enum class TextTower { mamba, attention_free_mlp };

TextTower parse_text_tower(std::string_view name);
std::string_view text_tower_name(TextTower tower);
ScanMode parse_scan_mode(std::string_view name);
std::string_view scan_mode_name(ScanMode mode);

struct ClipConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::vector<std::size_t> stage_depths{2, 2};
  std::vector<std::size_t> stage_dims{32, 64};
  std::size_t state_dim = 8;
  std::size_t expand = 2;
  std::size_t conv_width = 4;
  std::size_t embed_dim = 64;
  std::size_t text_dim = 64;
  std::size_t text_depth = 2;
  std::size_t context_len = kContextLen;
  TextTower text_tower = TextTower::mamba;
  ScanMode scan_mode = ScanMode::sequential;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;

  /// Block shape for a residual stream of width `dim`; dt rank is ceil(dim/16).
  MambaBlockConfig block(std::size_t dim, bool cross_scan) const;
};

/// Fresh parameters for `cfg`, all drawn from `seed`.
ParamSet<double> init_clip(const ClipConfig& cfg, std::uint64_t seed);

/// Throws std::invalid_argument naming the first tensor whose presence or
/// shape disagrees with the parameters `cfg` describes.
void check_params_match(const ClipConfig& cfg, const ParamSet<double>& params);

inline constexpr double kInitLogitScale = 2.659260036932778;  // ln(1/0.07)
inline constexpr double kMaxLogitScale = 100.0;

/// images: [B, S, S, 3] with S = cfg.image_size -> [B, embed_dim], unit rows.
template <class T>
Tensor<T> encode_image(const ParamSet<T>& params, const ClipConfig& cfg, const Tensor<T>& images);

/// Token sequences of length cfg.context_len -> [B, embed_dim], unit rows.
template <class T>
Tensor<T> encode_text(const ParamSet<T>& params, const ClipConfig& cfg, std::span<const TokenSequence> tokens);

/// Symmetric contrastive loss of matched rows; the logit multiplier is
/// min(exp(logit_scale), 100).
template <class T>
Tensor<T> clip_loss(const Tensor<T>& image_emb, const Tensor<T>& text_emb, const Tensor<T>& logit_scale);

/// Loads, center-crops and resizes every record's image into one
/// [N, S, S, 3] batch.
Tensor<double> load_image_batch(std::span<const ImageRecord> records, std::size_t image_size);

/// The selected rows of an image batch, converted to T.
template <class T>
Tensor<T> batch_rows(const Tensor<double>& images, std::span<const std::size_t> rows);

}  // namespace mambaclip
