#include "mambaclip/ten1.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace mambaclip {
namespace {

static_assert(std::endian::native == std::endian::little, "TEN1 I/O assumes a little-endian host");

constexpr std::array<char, 4> kMagic{'T', 'E', 'N', '1'};

void read_exact(std::istream& is, void* dst, std::size_t n, const char* what) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError(std::string("TEN1: truncated ") + what);
}

template <class T>
Tensor<T> read_body(std::istream& is, Shape shape) {
  std::vector<T> data(shape_numel(shape));
  read_exact(is, data.data(), data.size() * sizeof(T), "data");
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace

template <class T>
void write_ten1(std::ostream& os, const Tensor<T>& t) {
  os.write(kMagic.data(), kMagic.size());
  const auto code = static_cast<std::uint8_t>(dtype_of<T>::value);
  const auto rank = static_cast<std::uint8_t>(t.rank());
  os.put(static_cast<char>(code));
  os.put(static_cast<char>(rank));
  for (std::size_t d : t.shape()) {
    const std::uint64_t v = d;
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!os) throw FormatError("TEN1: write failed");
}

AnyTensor read_ten1(std::istream& is) {
  std::array<char, 4> magic{};
  read_exact(is, magic.data(), magic.size(), "magic");
  if (magic != kMagic) throw FormatError("TEN1: bad magic");
  std::uint8_t code = 0, rank = 0;
  read_exact(is, &code, 1, "dtype");
  read_exact(is, &rank, 1, "rank");
  if (rank > kMaxRank) throw FormatError("TEN1: rank " + std::to_string(rank) + " exceeds " + std::to_string(kMaxRank));
  Shape shape(rank);
  for (auto& d : shape) {
    std::uint64_t v = 0;
    read_exact(is, &v, sizeof v, "dims");
    if (v == 0 || v > (std::uint64_t{1} << 40)) throw FormatError("TEN1: invalid dimension " + std::to_string(v));
    d = static_cast<std::size_t>(v);
  }
  switch (static_cast<DType>(code)) {
    case DType::f32: return read_body<float>(is, std::move(shape));
    case DType::f64: return read_body<double>(is, std::move(shape));
    case DType::u8: return read_body<std::uint8_t>(is, std::move(shape));
  }
  throw FormatError("TEN1: unknown dtype code " + std::to_string(code));
}

template <class T>
void save_ten1(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_ten1(os, t);
}

AnyTensor load_ten1(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_ten1(is);
}

template void write_ten1<float>(std::ostream&, const Tensor<float>&);
template void write_ten1<double>(std::ostream&, const Tensor<double>&);
template void write_ten1<std::uint8_t>(std::ostream&, const Tensor<std::uint8_t>&);
template void save_ten1<float>(const std::filesystem::path&, const Tensor<float>&);
template void save_ten1<double>(const std::filesystem::path&, const Tensor<double>&);
template void save_ten1<std::uint8_t>(const std::filesystem::path&, const Tensor<std::uint8_t>&);

}  // namespace mambaclip
