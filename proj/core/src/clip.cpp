#include "mambaclip/clip.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "init_util.hpp"
#include "mambaclip/ops.hpp"

namespace mambaclip {

using detail::normal_tensor;

TextTower parse_text_tower(std::string_view name) {
  if (name == "mamba") return TextTower::mamba;
  if (name == "attention-free-mlp") return TextTower::attention_free_mlp;
  throw std::invalid_argument("text_tower must be 'mamba' or 'attention-free-mlp', got '" + std::string(name) + "'");
}

std::string_view text_tower_name(TextTower tower) {
  return tower == TextTower::mamba ? "mamba" : "attention-free-mlp";
}

ScanMode parse_scan_mode(std::string_view name) {
  if (name == "sequential") return ScanMode::sequential;
  if (name == "parallel") return ScanMode::parallel;
  throw std::invalid_argument("scan_mode must be 'sequential' or 'parallel', got '" + std::string(name) + "'");
}

std::string_view scan_mode_name(ScanMode mode) { return mode == ScanMode::sequential ? "sequential" : "parallel"; }

void ClipConfig::validate() const {
  const auto bad = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (patch_size == 0) bad("patch_size must be positive");
  if (stage_depths.empty()) bad("stage_depths must list at least one stage");
  if (stage_depths.size() != stage_dims.size()) bad("stage_depths and stage_dims must have the same length");
  for (std::size_t d : stage_dims) {
    if (d == 0) bad("stage_dims entries must be positive");
  }
  const std::size_t factor = patch_size << (stage_depths.size() - 1);
  if (image_size == 0 || image_size % factor != 0) {
    bad("image_size " + std::to_string(image_size) + " must be divisible by patch_size × 2^(stages−1) = " +
        std::to_string(factor));
  }
  if (state_dim == 0 || expand == 0 || conv_width == 0) bad("state_dim, expand and conv_width must be positive");
  if (embed_dim == 0 || text_dim == 0) bad("embed_dim and text_dim must be positive");
  if (context_len < 2) bad("context_len must be at least 2");
}

MambaBlockConfig ClipConfig::block(std::size_t dim, bool cross_scan) const {
  return {dim, expand * dim, state_dim, conv_width, std::max<std::size_t>(1, (dim + 15) / 16), cross_scan};
}

namespace {

std::string stage_prefix(std::size_t s) { return "visual.stage" + std::to_string(s) + "."; }
std::string block_prefix(std::size_t s, std::size_t b) { return stage_prefix(s) + "block" + std::to_string(b) + "."; }
std::string text_block_prefix(std::size_t i) { return "text.block" + std::to_string(i) + "."; }

double inv_sqrt(std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); }

void add_linear(ParamSet<double>& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                bool bias = true) {
  p.add(name + ".weight", normal_tensor(rng, {in, out}, inv_sqrt(in)));
  if (bias) p.add(name + ".bias", Tensor<double>::zeros({out}));
}

void add_norm(ParamSet<double>& p, const std::string& name, std::size_t dim) {
  p.add(name + ".gain", Tensor<double>::full({dim}, 1.0));
  p.add(name + ".shift", Tensor<double>::zeros({dim}));
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const ParamSet<T>& p, const std::string& name) {
  Tensor<T> y = matmul(x, p[name + ".weight"]);
  if (p.contains(name + ".bias")) y = add(y, p[name + ".bias"]);
  return y;
}

template <class T>
Tensor<T> norm(const Tensor<T>& x, const ParamSet<T>& p, const std::string& name) {
  return layernorm(x, p[name + ".gain"], p[name + ".shift"]);
}

}  // namespace

ParamSet<double> init_clip(const ClipConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamSet<double> p;
  Rng rng(derive_seed(seed, 0x1d17));
  const std::size_t P = cfg.patch_size;

  add_linear(p, "visual.patch", P * P * 3, cfg.stage_dims[0], rng);
  for (std::size_t s = 0; s < cfg.stage_depths.size(); ++s) {
    const std::size_t d = cfg.stage_dims[s];
    if (s > 0) add_linear(p, stage_prefix(s) + "down", 4 * cfg.stage_dims[s - 1], d, rng);
    for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b) init_mamba_block(p, block_prefix(s, b), cfg.block(d, true), rng);
  }
  add_norm(p, "visual.norm", cfg.stage_dims.back());
  add_linear(p, "visual.proj", cfg.stage_dims.back(), cfg.embed_dim, rng, false);

  const std::size_t D = cfg.text_dim;
  p.add("text.token_embedding.weight", normal_tensor(rng, {kVocabSize, D}, 1.0));
  if (cfg.text_tower == TextTower::mamba) {
    for (std::size_t i = 0; i < cfg.text_depth; ++i) init_mamba_block(p, text_block_prefix(i), cfg.block(D, false), rng);
  } else {
    p.add("text.position_embedding.weight", normal_tensor(rng, {cfg.context_len, D}, 1.0));
    for (std::size_t i = 0; i < cfg.text_depth; ++i) {
      add_linear(p, text_block_prefix(i) + "fc1", D, cfg.expand * D, rng);
      add_linear(p, text_block_prefix(i) + "fc2", cfg.expand * D, D, rng);
    }
  }
  add_norm(p, "text.norm", D);
  add_linear(p, "text.proj", D, cfg.embed_dim, rng, false);

  p.add("logit_scale", Tensor<double>::scalar(kInitLogitScale));
  return p;
}

void check_params_match(const ClipConfig& cfg, const ParamSet<double>& params) {
  const ParamSet<double> expected = init_clip(cfg, 0);
  for (const auto& [name, t] : expected) {
    if (!params.contains(name)) throw std::invalid_argument("checkpoint is missing tensor '" + name + "'");
    const auto& got = params[name];
    if (got.shape() != t.shape()) {
      throw std::invalid_argument("tensor '" + name + "' has shape " + shape_str(got.shape()) + ", config needs " +
                                  shape_str(t.shape()));
    }
  }
  for (const auto& [name, t] : params) {
    if (!expected.contains(name)) throw std::invalid_argument("checkpoint has unexpected tensor '" + name + "'");
  }
}

template <class T>
Tensor<T> encode_image(const ParamSet<T>& p, const ClipConfig& cfg, const Tensor<T>& images) {
  if (images.rank() != 4 || images.dim(1) != cfg.image_size || images.dim(2) != cfg.image_size ||
      images.dim(3) != 3) {
    throw ShapeError("encode_image: expected [B, " + std::to_string(cfg.image_size) + ", " +
                     std::to_string(cfg.image_size) + ", 3], got " + shape_str(images.shape()));
  }
  const std::size_t B = images.dim(0);
  Tensor<T> x = linear(space_to_depth(images, cfg.patch_size), p, "visual.patch");
  for (std::size_t s = 0; s < cfg.stage_depths.size(); ++s) {
    if (s > 0) x = linear(space_to_depth(x, 2), p, stage_prefix(s) + "down");
    const std::size_t h = x.dim(1), w = x.dim(2), d = x.dim(3);
    const MambaBlockConfig bc = cfg.block(d, true);
    Tensor<T> seq = reshape(x, Shape{B, h * w, d});
    for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b) {
      seq = mamba_block_forward(seq, bc, MambaBlockWeights<T>::from(p, block_prefix(s, b), bc), GridSize{h, w},
                                cfg.scan_mode);
    }
    x = reshape(seq, Shape{B, h, w, d});
  }
  const std::size_t d = x.dim(3);
  const Tensor<T> tokens = norm(reshape(x, Shape{B, x.dim(1) * x.dim(2), d}), p, "visual.norm");
  return l2_normalize(linear(mean(tokens, 1), p, "visual.proj"));
}

template <class T>
Tensor<T> encode_text(const ParamSet<T>& p, const ClipConfig& cfg, std::span<const TokenSequence> tokens) {
  if (tokens.empty()) throw ShapeError("encode_text: empty batch");
  const std::size_t B = tokens.size();
  std::size_t L = 0;
  std::vector<std::size_t> eos(B);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& t = tokens[b];
    if (t.ids.size() != cfg.context_len) {
      throw ShapeError("encode_text: sequence " + std::to_string(b) + " has length " + std::to_string(t.ids.size()) +
                       ", context is " + std::to_string(cfg.context_len));
    }
    if (t.eos_position >= t.ids.size() || t.ids[t.eos_position] != kEos) {
      throw std::invalid_argument("encode_text: sequence " + std::to_string(b) + " has no EOS at its eos_position");
    }
    eos[b] = t.eos_position;
    L = std::max(L, t.eos_position + 1);
  }
  // Positions after the last EOS cannot reach any EOS state (every tower is
  // causal), so the batch is cut to the longest prefix that matters.
  std::vector<std::size_t> ids(B * L);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < L; ++i) {
      const auto id = tokens[b].ids[i];
      if (id < 0 || static_cast<std::size_t>(id) >= kVocabSize) {
        throw std::invalid_argument("encode_text: token id " + std::to_string(id) + " out of range");
      }
      ids[b * L + i] = static_cast<std::size_t>(id);
    }
  }
  Tensor<T> x = embedding(p["text.token_embedding.weight"], ids, Shape{B, L});
  const std::size_t D = cfg.text_dim;

  if (cfg.text_tower == TextTower::mamba) {
    const MambaBlockConfig bc = cfg.block(D, false);
    for (std::size_t i = 0; i < cfg.text_depth; ++i) {
      x = mamba_block_forward(x, bc, MambaBlockWeights<T>::from(p, text_block_prefix(i), bc), std::nullopt,
                              cfg.scan_mode);
    }
  } else {
    std::vector<std::size_t> pos(B * L);
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % L;
    x = add(x, embedding(p["text.position_embedding.weight"], pos, Shape{B, L}));
    // Causal running mean over positions: out[:, t] = mean(x[:, 0..t]).
    std::vector<T> avg(L * L, T(0));
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t s = 0; s <= t; ++s) avg[s * L + t] = T(1.0 / static_cast<double>(t + 1));
    const std::vector<std::size_t> swap{0, 2, 1};
    x = transpose(matmul(transpose(x, swap), Tensor<T>({L, L}, std::move(avg))), swap);
    for (std::size_t i = 0; i < cfg.text_depth; ++i) {
      const std::string pre = text_block_prefix(i);
      x = add(x, linear(silu(linear(x, p, pre + "fc1")), p, pre + "fc2"));
    }
  }
  return l2_normalize(linear(select_positions(norm(x, p, "text.norm"), eos), p, "text.proj"));
}

template <class T>
Tensor<T> clip_loss(const Tensor<T>& image_emb, const Tensor<T>& text_emb, const Tensor<T>& logit_scale) {
  if (image_emb.rank() != 2 || text_emb.rank() != 2 || image_emb.shape() != text_emb.shape()) {
    throw ShapeError("clip_loss: embeddings must both be [B, d], got " + shape_str(image_emb.shape()) + " and " +
                     shape_str(text_emb.shape()));
  }
  if (logit_scale.numel() != 1) throw ShapeError("clip_loss: logit_scale must be a scalar");
  const std::size_t B = image_emb.dim(0);
  const Tensor<T> multiplier = reshape(clamp_max(exp(logit_scale), kMaxLogitScale), Shape{});
  const Tensor<T> logits = mul(matmul(image_emb, transpose(text_emb)), multiplier);
  std::vector<std::size_t> diag(B);
  for (std::size_t i = 0; i < B; ++i) diag[i] = i;
  return scale(add(cross_entropy(logits, diag), cross_entropy(transpose(logits), diag)), 0.5);
}

Tensor<double> load_image_batch(std::span<const ImageRecord> records, std::size_t image_size) {
  if (records.empty()) throw ShapeError("load_image_batch: no records");
  const std::size_t per = image_size * image_size * 3;
  std::vector<double> all(records.size() * per);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const Tensor<float> img = center_crop_resize(decode_image(records[i].image), image_size);
    std::copy(img.data().begin(), img.data().end(), all.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return Tensor<double>({records.size(), image_size, image_size, 3}, std::move(all));
}

template <class T>
Tensor<T> batch_rows(const Tensor<double>& images, std::span<const std::size_t> rows) {
  if (rows.empty()) throw ShapeError("batch_rows: no rows selected");
  const std::size_t per = images.numel() / images.dim(0);
  std::vector<T> out(rows.size() * per);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= images.dim(0)) throw ShapeError("batch_rows: row " + std::to_string(rows[i]) + " out of range");
    for (std::size_t k = 0; k < per; ++k) out[i * per + k] = T(images[rows[i] * per + k]);
  }
  Shape shape = images.shape();
  shape[0] = rows.size();
  return Tensor<T>(std::move(shape), std::move(out));
}

#define MAMBACLIP_INSTANTIATE_CLIP(T)                                                                       \
  template Tensor<T> encode_image<T>(const ParamSet<T>&, const ClipConfig&, const Tensor<T>&);              \
  template Tensor<T> encode_text<T>(const ParamSet<T>&, const ClipConfig&, std::span<const TokenSequence>); \
  template Tensor<T> clip_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> batch_rows<T>(const Tensor<double>&, std::span<const std::size_t>);

MAMBACLIP_INSTANTIATE_CLIP(float)
MAMBACLIP_INSTANTIATE_CLIP(double)
MAMBACLIP_INSTANTIATE_CLIP(Dual)

}  // namespace mambaclip
