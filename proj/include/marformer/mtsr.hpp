#pragma once

#include <filesystem>
#include <iosfwd>

#include "marformer/tensor.hpp"

namespace marformer {

/// MTSR1 binary tensor format:
///   "MTSR" | u8 version (1) | u8 dtype (0=f32, 1=f64) | u8 rank |
///   rank x u32 LE extents | raw LE values.
namespace mtsr {

inline constexpr std::uint8_t kVersion = 1;

/// Byte size of the encoded tensor, header included.
std::uint64_t encoded_size(const Tensor& t);

void write(std::ostream& os, const Tensor& t);
Tensor read(std::istream& is);

void save(const std::filesystem::path& path, const Tensor& t);
Tensor load(const std::filesystem::path& path);

}  // namespace mtsr
}  // namespace marformer
