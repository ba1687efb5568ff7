#include "mambaclip/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>

#include "mambaclip/ten1.hpp"

namespace mambaclip {

namespace fs = std::filesystem;
using nlohmann::json;

ManifestKind parse_manifest_kind(std::string_view name) {
  if (name == "caption-pairs") return ManifestKind::caption_pairs;
  if (name == "labeled") return ManifestKind::labeled;
  if (name == "cue-conflict") return ManifestKind::cue_conflict;
  throw ManifestError("unknown manifest kind '" + std::string(name) + "'");
}

std::string_view manifest_kind_name(ManifestKind kind) {
  switch (kind) {
    case ManifestKind::caption_pairs: return "caption-pairs";
    case ManifestKind::labeled: return "labeled";
    case ManifestKind::cue_conflict: return "cue-conflict";
  }
  return "?";
}

std::vector<std::string> DatasetManifest::class_names() const {
  std::map<std::int64_t, std::string> names;
  for (const auto& r : records) {
    if (!r.label_index) throw ManifestError("line " + std::to_string(r.line) + ": no label_index");
    auto [it, inserted] = names.emplace(*r.label_index, r.label_name);
    if (!inserted && it->second != r.label_name) {
      throw ManifestError("line " + std::to_string(r.line) + ": label_index " + std::to_string(*r.label_index) +
                          " named both '" + it->second + "' and '" + r.label_name + "'");
    }
  }
  std::vector<std::string> out;
  for (const auto& [index, name] : names) {
    if (index != static_cast<std::int64_t>(out.size())) {
      throw ManifestError("no record names label_index " + std::to_string(out.size()));
    }
    out.push_back(name);
  }
  return out;
}

namespace {

std::string line_prefix(std::size_t line) { return "line " + std::to_string(line) + ": "; }

std::string required_string(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ManifestError(line_prefix(line) + "missing field '" + key + "'");
  if (!it->is_string()) throw ManifestError(line_prefix(line) + "field '" + key + "' must be a string");
  return it->get<std::string>();
}

std::optional<std::string> optional_string(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw ManifestError(line_prefix(line) + "field '" + key + "' must be a string");
  return it->get<std::string>();
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path, ManifestKind kind) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  DatasetManifest m;
  m.kind = kind;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    const auto first = text.find_first_not_of(" \t\r");
    if (first == std::string::npos || text[first] == '#') continue;
    json obj;
    try {
      obj = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ManifestError(line_prefix(line) + "malformed record: " + e.what());
    }
    if (!obj.is_object()) throw ManifestError(line_prefix(line) + "record must be an object");

    ImageRecord r;
    r.line = line;
    fs::path image = required_string(obj, "image", line);
    r.image = image.is_absolute() ? image : base / image;
    if (!fs::exists(r.image)) throw ManifestError(line_prefix(line) + "image not found: " + r.image.string());
    r.caption = optional_string(obj, "caption", line).value_or("");
    r.label_name = optional_string(obj, "label_name", line).value_or("");
    r.shape_category = optional_string(obj, "shape_category", line).value_or("");
    r.texture_category = optional_string(obj, "texture_category", line).value_or("");
    r.category16 = optional_string(obj, "category16", line);
    if (auto it = obj.find("label_index"); it != obj.end() && !it->is_null()) {
      if (!it->is_number_integer()) throw ManifestError(line_prefix(line) + "label_index must be an integer");
      r.label_index = it->get<std::int64_t>();
      if (*r.label_index < 0) throw ManifestError(line_prefix(line) + "label_index must be >= 0");
    }

    switch (kind) {
      case ManifestKind::caption_pairs:
        (void)required_string(obj, "caption", line);
        break;
      case ManifestKind::labeled:
        if (!r.label_index) throw ManifestError(line_prefix(line) + "missing field 'label_index'");
        (void)required_string(obj, "label_name", line);
        break;
      case ManifestKind::cue_conflict:
        (void)required_string(obj, "shape_category", line);
        (void)required_string(obj, "texture_category", line);
        if (r.shape_category == r.texture_category) {
          throw ManifestError(line_prefix(line) + "shape_category equals texture_category");
        }
        break;
    }
    m.records.push_back(std::move(r));
  }
  if (m.records.empty()) throw ManifestError("manifest " + path.string() + " has no records");
  return m;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  const fs::path base = path.parent_path();
  std::ofstream out(path);
  if (!out) throw ManifestError("cannot write manifest " + path.string());
  for (const auto& r : manifest.records) {
    json obj;
    const fs::path rel = r.image.lexically_relative(base.empty() ? fs::path(".") : base);
    const bool inside = !rel.empty() && *rel.begin() != "..";
    obj["image"] = inside ? rel.generic_string() : r.image.generic_string();
    if (!r.caption.empty()) obj["caption"] = r.caption;
    if (r.label_index) obj["label_index"] = *r.label_index;
    if (!r.label_name.empty()) obj["label_name"] = r.label_name;
    if (!r.shape_category.empty()) obj["shape_category"] = r.shape_category;
    if (!r.texture_category.empty()) obj["texture_category"] = r.texture_category;
    if (r.category16) obj["category16"] = *r.category16;
    out << obj.dump() << '\n';
  }
  if (!out) throw ManifestError("failed writing manifest " + path.string());
}

namespace {

bool has_png_signature(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  return in.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0;
}

Tensor<std::uint8_t> read_png(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw ImageError(path.string() + ": " + img.message);
  }
  const auto fail = [&](const std::string& why) {
    png_image_free(&img);
    throw ImageError(path.string() + ": " + why);
  };
  if ((img.format & PNG_FORMAT_FLAG_COLOR) == 0) fail("not an RGB image (grayscale)");
  if (img.format & PNG_FORMAT_FLAG_ALPHA) fail("not an RGB image (has alpha channel)");
  if (img.format & PNG_FORMAT_FLAG_LINEAR) fail("not an 8-bit image");
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw ImageError(path.string() + ": " + msg);
  }
  return Tensor<std::uint8_t>({img.height, img.width, 3}, std::move(pixels));
}

}  // namespace

Tensor<std::uint8_t> decode_image_u8(const fs::path& path) {
  if (has_png_signature(path)) return read_png(path);
  AnyTensor any;
  try {
    any = load_ten1(path);
  } catch (const FormatError& e) {
    throw ImageError(path.string() + ": unsupported image format (" + e.what() + ")");
  }
  auto* t = std::get_if<Tensor<std::uint8_t>>(&any);
  if (t == nullptr) throw ImageError(path.string() + ": TEN1 image must have dtype u8");
  if (t->rank() != 3 || t->dim(2) != 3) {
    throw ImageError(path.string() + ": TEN1 image must be H×W×3, got " + shape_str(t->shape()));
  }
  return *t;
}

Tensor<float> decode_image(const fs::path& path) {
  const auto u8 = decode_image_u8(path);
  std::vector<float> v(u8.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(u8[i]) / 255.0f;
  return Tensor<float>(u8.shape(), std::move(v));
}

void encode_png(const fs::path& path, const Tensor<std::uint8_t>& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ImageError("encode_png: expected H×W×3, got " + shape_str(image.shape()));
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.dim(1));
  img.height = static_cast<png_uint_32>(image.dim(0));
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.data().data(), 0, nullptr)) {
    throw ImageError(path.string() + ": " + img.message);
  }
}

Tensor<std::uint8_t> to_u8(const Tensor<float>& image) {
  std::vector<std::uint8_t> v(image.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float x = std::clamp(image[i], 0.0f, 1.0f);
    v[i] = static_cast<std::uint8_t>(std::lround(x * 255.0f));
  }
  return Tensor<std::uint8_t>(image.shape(), std::move(v));
}

Tensor<float> center_crop_resize(const Tensor<float>& image, std::size_t size) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ImageError("expected H×W×3 image, got " + shape_str(image.shape()));
  if (size == 0) throw ImageError("resize target must be positive");
  const std::size_t h = image.dim(0), w = image.dim(1), side = std::min(h, w);
  const std::size_t top = (h - side) / 2, left = (w - side) / 2;
  std::vector<float> out(size * size * 3);
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t si = top + (2 * i + 1) * side / (2 * size);
    for (std::size_t j = 0; j < size; ++j) {
      const std::size_t sj = left + (2 * j + 1) * side / (2 * size);
      for (std::size_t c = 0; c < 3; ++c) out[(i * size + j) * 3 + c] = image[(si * w + sj) * 3 + c];
    }
  }
  return Tensor<float>({size, size, 3}, std::move(out));
}

TokenSequence tokenize(std::string_view text, std::size_t context_len) {
  if (context_len < 2) throw std::invalid_argument("context_len must be at least 2");
  const std::size_t keep = std::min(text.size(), context_len - 2);
  TokenSequence t;
  t.ids.assign(context_len, kPad);
  t.ids[0] = kBos;
  for (std::size_t i = 0; i < keep; ++i) t.ids[i + 1] = static_cast<unsigned char>(text[i]);
  t.eos_position = keep + 1;
  t.ids[t.eos_position] = kEos;
  return t;
}

std::string detokenize(const TokenSequence& tokens) {
  std::string out;
  for (std::size_t i = 1; i < tokens.eos_position && i < tokens.ids.size(); ++i) {
    out.push_back(static_cast<char>(tokens.ids[i]));
  }
  return out;
}

}  // namespace mambaclip
