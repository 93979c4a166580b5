#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace marformer {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-level layout. Index 0..2 are encoder/decoder levels 1..3, index 3 is
/// the bottleneck.
struct LevelSpec {
  std::int64_t channels;
  std::int64_t blocks;
  std::int64_t heads;
  std::int64_t resolution_divisor;
};

using LevelPlan = std::array<LevelSpec, 4>;

inline constexpr int kNumLevels = 3;

struct MARformerConfig {
  std::int64_t base_channels = 48;
  double expansion = 2.0;
  std::int64_t ffn_kernel = 7;
  std::int64_t spatial_ratio = 2;
  std::int64_t channel_ratio = 2;
  std::array<std::int64_t, 4> blocks{1, 2, 4, 8};
  std::array<std::int64_t, 4> heads{1, 2, 4, 8};
  bool fixed_width = false;

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;

  /// Channels at level index 0..3 (3 = bottleneck).
  std::int64_t level_channels(int level) const;
  /// Width of the P2FFN hidden layer for an input of `channels`.
  std::int64_t hidden_channels(std::int64_t channels) const;
  LevelPlan plan() const;

  /// key=value lines, one per field.
  std::string to_text() const;
  static MARformerConfig from_text(std::string_view text);

  bool operator==(const MARformerConfig&) const = default;
};

/// Published presets "L", "B" and "T".
MARformerConfig preset(std::string_view name);

}  // namespace marformer
