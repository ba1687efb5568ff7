#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mambaclip/tensor.hpp"

// Ingestion layer: manifests, image files and the byte-level tokenizer.
//
// A manifest is a JSON-lines file, one object per record, with the fields
// `image`, `caption`, `label_index`, `label_name`, `shape_category`,
// `texture_category` and `category16`. Relative image paths resolve against
// the manifest's directory. Blank lines and lines starting with '#' are
// skipped.

namespace mambaclip {

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ManifestKind { caption_pairs, labeled, cue_conflict };

ManifestKind parse_manifest_kind(std::string_view name);
std::string_view manifest_kind_name(ManifestKind kind);

struct ImageRecord {
  std::filesystem::path image;  // resolved path
  std::string caption;
  std::optional<std::int64_t> label_index;
  std::string label_name;
  std::string shape_category;
  std::string texture_category;
  std::optional<std::string> category16;
  std::size_t line = 0;  // 1-based source line
};

struct DatasetManifest {
  ManifestKind kind = ManifestKind::caption_pairs;
  std::vector<ImageRecord> records;

  /// Class names indexed by label_index; every index in [0, max] must have a
  /// name. Labeled manifests only.
  std::vector<std::string> class_names() const;
};

DatasetManifest load_manifest(const std::filesystem::path& path, ManifestKind kind);

/// Writes records with image paths relative to the manifest's directory when
/// they live below it.
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// 8-bit RGB PNG or TEN1 rank-3 u8 with 3 channels, as stored.
Tensor<std::uint8_t> decode_image_u8(const std::filesystem::path& path);

/// H×W×3 in [0, 1], value/255.
Tensor<float> decode_image(const std::filesystem::path& path);

/// Writes an H×W×3 u8 image as an 8-bit RGB PNG.
void encode_png(const std::filesystem::path& path, const Tensor<std::uint8_t>& image);

/// round(255·x) with x clamped to [0, 1].
Tensor<std::uint8_t> to_u8(const Tensor<float>& image);

/// Center-crop to the largest square, then nearest-neighbor resize to size×size.
Tensor<float> center_crop_resize(const Tensor<float>& image, std::size_t size);

inline constexpr std::int32_t kBos = 256;
inline constexpr std::int32_t kEos = 257;
inline constexpr std::int32_t kPad = 258;
inline constexpr std::size_t kVocabSize = 259;
inline constexpr std::size_t kContextLen = 64;

struct TokenSequence {
  std::vector<std::int32_t> ids;
  std::size_t eos_position = 0;
};

/// BOS, the first context_len−2 bytes of `text`, EOS, then PAD.
TokenSequence tokenize(std::string_view text, std::size_t context_len = kContextLen);

/// The bytes between BOS and EOS.
std::string detokenize(const TokenSequence& tokens);

}  // namespace mambaclip
