#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mambaclip/tensor.hpp"

// Colored-shape toy corpus: 8 colors × 8 shapes = 64 distinct caption-image
// pairs, plus a labeled view whose 8 classes are the colors.

namespace mambaclip {

inline constexpr std::array<std::string_view, 8> kSyntheticColors{"red",  "green",   "blue",  "yellow",
                                                                   "cyan", "magenta", "white", "orange"};
inline constexpr std::array<std::string_view, 8> kSyntheticShapes{"circle", "square", "triangle", "cross",
                                                                   "ring",   "diamond", "bar", "column"};

/// size×size×3 image of shape `shape` in color `color` on a dark background.
Tensor<std::uint8_t> render_synthetic_image(std::size_t color, std::size_t shape, std::size_t size);

/// "a photo of a <color> <shape>."
std::string synthetic_caption(std::size_t color, std::size_t shape);

/// One template per shape, "a photo of a {} <shape>.", so that the prompt
/// ensemble averages a color class over every shape it appears with.
std::vector<std::string> synthetic_color_templates();

struct SyntheticDataset {
  std::filesystem::path captions;  // caption-pairs manifest
  std::filesystem::path labeled;   // labeled manifest, classes = colors
};

/// Writes the 64 PNG images and both manifests under `dir`.
SyntheticDataset write_synthetic_dataset(const std::filesystem::path& dir, std::size_t image_size);

}  // namespace mambaclip
