#include "marformer/mtsr.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace marformer::mtsr {

namespace {

constexpr std::array<char, 4> kMagic{'M', 'T', 'S', 'R'};

template <typename U>
void put_le(std::ostream& os, U value) {
  std::array<unsigned char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

template <typename U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw TensorError("MTSR1: truncated stream");
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

std::uint64_t encoded_size(const Tensor& t) {
  const std::uint64_t elem = t.dtype() == DType::f32 ? 4 : 8;
  return 4 + 3 + 4 * t.rank() + elem * static_cast<std::uint64_t>(t.numel());
}

void write(std::ostream& os, const Tensor& t) {
  if (t.rank() > 255) {
    throw TensorError("MTSR1: rank exceeds 255");
  }
  os.write(kMagic.data(), kMagic.size());
  put_le<std::uint8_t>(os, kVersion);
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype()));
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  }
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (T v : t.data<T>()) put_le<Bits>(os, std::bit_cast<Bits>(v));
  });
  if (!os) {
    throw TensorError("MTSR1: write failed");
  }
}

Tensor read(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size())) {
    throw TensorError("MTSR1: truncated stream");
  }
  if (magic != kMagic) {
    throw TensorError("MTSR1: bad magic");
  }
  const auto version = get_le<std::uint8_t>(is);
  if (version != kVersion) {
    throw TensorError("MTSR1: unsupported version " + std::to_string(version));
  }
  const auto dtype_byte = get_le<std::uint8_t>(is);
  if (dtype_byte > 1) {
    throw TensorError("MTSR1: unknown dtype byte " + std::to_string(dtype_byte));
  }
  const auto rank = get_le<std::uint8_t>(is);
  Shape shape;
  for (std::uint8_t i = 0; i < rank; ++i) {
    const auto e = get_le<std::uint32_t>(is);
    if (e == 0) throw TensorError("MTSR1: zero extent");
    shape.push_back(e);
  }
  Tensor t(shape, static_cast<DType>(dtype_byte));
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (T& v : t.data<T>()) v = std::bit_cast<T>(get_le<Bits>(is));
  });
  return t;
}

void save(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw TensorError("MTSR1: cannot open " + path.string() + " for writing");
  }
  write(os, t);
}

Tensor load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw TensorError("MTSR1: cannot open " + path.string());
  }
  return read(is);
}

}  // namespace marformer::mtsr
