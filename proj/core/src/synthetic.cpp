#include "mambaclip/synthetic.hpp"

#include <cmath>
#include <stdexcept>

#include "mambaclip/data.hpp"

namespace mambaclip {

namespace {

constexpr std::array<std::array<std::uint8_t, 3>, 8> kRgb{{{230, 40, 40},
                                                          {40, 200, 40},
                                                          {40, 70, 230},
                                                          {230, 220, 40},
                                                          {40, 210, 220},
                                                          {220, 40, 210},
                                                          {240, 240, 240},
                                                          {240, 140, 30}}};
constexpr std::uint8_t kBackground = 25;

// (x, y) in [-1, 1]², y pointing down.
bool inside(std::size_t shape, double x, double y) {
  const double r = std::hypot(x, y);
  switch (shape) {
    case 0: return r < 0.7;
    case 1: return std::max(std::abs(x), std::abs(y)) < 0.6;
    case 2: return y > -0.65 && y < 0.6 && std::abs(x) < 0.75 * (y + 0.65) / 1.25;
    case 3: return std::max(std::abs(x), std::abs(y)) < 0.8 && std::min(std::abs(x), std::abs(y)) < 0.22;
    case 4: return r > 0.4 && r < 0.78;
    case 5: return std::abs(x) + std::abs(y) < 0.8;
    case 6: return std::abs(x) < 0.85 && std::abs(y) < 0.25;
    case 7: return std::abs(x) < 0.25 && std::abs(y) < 0.85;
    default: throw std::out_of_range("synthetic shape index " + std::to_string(shape));
  }
}

}  // namespace

Tensor<std::uint8_t> render_synthetic_image(std::size_t color, std::size_t shape, std::size_t size) {
  if (color >= kRgb.size()) throw std::out_of_range("synthetic color index " + std::to_string(color));
  if (shape >= kSyntheticShapes.size()) throw std::out_of_range("synthetic shape index " + std::to_string(shape));
  std::vector<std::uint8_t> px(size * size * 3, kBackground);
  for (std::size_t i = 0; i < size; ++i) {
    const double y = (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(size) - 1.0;
    for (std::size_t j = 0; j < size; ++j) {
      const double x = (2.0 * static_cast<double>(j) + 1.0) / static_cast<double>(size) - 1.0;
      if (!inside(shape, x, y)) continue;
      for (std::size_t c = 0; c < 3; ++c) px[(i * size + j) * 3 + c] = kRgb[color][c];
    }
  }
  return Tensor<std::uint8_t>({size, size, 3}, std::move(px));
}

std::string synthetic_caption(std::size_t color, std::size_t shape) {
  return "a photo of a " + std::string(kSyntheticColors.at(color)) + " " + std::string(kSyntheticShapes.at(shape)) +
         ".";
}

std::vector<std::string> synthetic_color_templates() {
  std::vector<std::string> out;
  for (auto shape : kSyntheticShapes) out.push_back("a photo of a {} " + std::string(shape) + ".");
  return out;
}

SyntheticDataset write_synthetic_dataset(const std::filesystem::path& dir, std::size_t image_size) {
  std::filesystem::create_directories(dir / "images");
  DatasetManifest captions{ManifestKind::caption_pairs, {}};
  DatasetManifest labeled{ManifestKind::labeled, {}};
  for (std::size_t c = 0; c < kSyntheticColors.size(); ++c) {
    for (std::size_t s = 0; s < kSyntheticShapes.size(); ++s) {
      const auto file = dir / "images" /
                        (std::string(kSyntheticColors[c]) + "_" + std::string(kSyntheticShapes[s]) + ".png");
      encode_png(file, render_synthetic_image(c, s, image_size));
      ImageRecord r;
      r.image = file;
      r.caption = synthetic_caption(c, s);
      captions.records.push_back(r);
      r.caption.clear();
      r.label_index = static_cast<std::int64_t>(c);
      r.label_name = std::string(kSyntheticColors[c]);
      labeled.records.push_back(r);
    }
  }
  SyntheticDataset out{dir / "captions.jsonl", dir / "colors.jsonl"};
  write_manifest(out.captions, captions);
  write_manifest(out.labeled, labeled);
  return out;
}

}  // namespace mambaclip
