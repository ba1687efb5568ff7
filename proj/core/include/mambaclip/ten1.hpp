#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <variant>

#include "mambaclip/tensor.hpp"

// TEN1 raw tensor files: magic "TEN1", u8 dtype code (1=f32, 2=f64, 3=u8),
// u8 rank, rank × u64 little-endian dims, then little-endian row-major data.

namespace mambaclip {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using AnyTensor = std::variant<Tensor<float>, Tensor<double>, Tensor<std::uint8_t>>;

template <class T>
void write_ten1(std::ostream& os, const Tensor<T>& t);
AnyTensor read_ten1(std::istream& is);

/// Reads a TEN1 tensor and checks that its dtype is T.
template <class T>
Tensor<T> read_ten1_as(std::istream& is) {
  AnyTensor any = read_ten1(is);
  if (auto* t = std::get_if<Tensor<T>>(&any)) return std::move(*t);
  throw FormatError("TEN1: unexpected dtype");
}

template <class T>
void save_ten1(const std::filesystem::path& path, const Tensor<T>& t);
AnyTensor load_ten1(const std::filesystem::path& path);

}  // namespace mambaclip
