#include "marformer/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <vector>

namespace marformer {

namespace {

bool is_supported_ratio(std::int64_t r) {
  return r == 1 || r == 2 || r == 4 || r == 8 || r == 16;
}

std::string join4(const std::array<std::int64_t, 4>& v) {
  return std::to_string(v[0]) + "," + std::to_string(v[1]) + "," + std::to_string(v[2]) + "," +
         std::to_string(v[3]);
}

std::int64_t parse_int(std::string_view s, std::string_view key) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw ConfigError("config: bad integer for '" + std::string(key) + "': " + std::string(s));
  }
  return v;
}

std::array<std::int64_t, 4> parse_int4(std::string_view s, std::string_view key) {
  std::array<std::int64_t, 4> out{};
  std::size_t pos = 0;
  for (int i = 0; i < 4; ++i) {
    const std::size_t comma = s.find(',', pos);
    const bool last = i == 3;
    if (last != (comma == std::string_view::npos)) {
      throw ConfigError("config: '" + std::string(key) + "' needs exactly 4 comma-separated values");
    }
    out[i] = parse_int(s.substr(pos, last ? std::string_view::npos : comma - pos), key);
    pos = comma + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

std::int64_t MARformerConfig::level_channels(int level) const {
  if (level < 0 || level > kNumLevels) {
    throw ConfigError("level index out of range");
  }
  return fixed_width ? base_channels : base_channels << level;
}

std::int64_t MARformerConfig::hidden_channels(std::int64_t channels) const {
  return static_cast<std::int64_t>(std::llround(expansion * static_cast<double>(channels)));
}

LevelPlan MARformerConfig::plan() const {
  LevelPlan p{};
  for (int k = 0; k <= kNumLevels; ++k) {
    p[k] = {level_channels(k), blocks[k], heads[k], std::int64_t{1} << k};
  }
  return p;
}

void MARformerConfig::validate() const {
  if (base_channels <= 0) throw ConfigError("config: base_channels must be positive");
  if (ffn_kernel <= 0 || ffn_kernel % 2 == 0) {
    throw ConfigError("config: ffn_kernel must be a positive odd integer");
  }
  if (!is_supported_ratio(spatial_ratio) || !is_supported_ratio(channel_ratio)) {
    throw ConfigError("config: spatial_ratio and channel_ratio must be in {1,2,4,8,16}");
  }
  if (!(expansion > 0.0)) throw ConfigError("config: expansion must be positive");
  for (int k = 0; k <= kNumLevels; ++k) {
    const std::int64_t c = level_channels(k);
    if (blocks[k] < 0) throw ConfigError("config: block counts must be non-negative");
    if (heads[k] <= 0) throw ConfigError("config: head counts must be positive");
    if (c % heads[k] != 0 || c % (channel_ratio * heads[k]) != 0) {
      throw ConfigError("config: level " + std::to_string(k + 1) + " channels " +
                        std::to_string(c) + " not divisible by heads*channel_ratio = " +
                        std::to_string(heads[k] * channel_ratio));
    }
    const double hidden = expansion * static_cast<double>(c);
    if (std::abs(hidden - std::round(hidden)) > 1e-9) {
      throw ConfigError("config: expansion * channels must be integral at every level");
    }
  }
}

std::string MARformerConfig::to_text() const {
  char expansion_buf[64];
  std::snprintf(expansion_buf, sizeof expansion_buf, "%.17g", expansion);
  std::ostringstream os;
  os << "base_channels=" << base_channels << '\n'
     << "expansion=" << expansion_buf << '\n'
     << "ffn_kernel=" << ffn_kernel << '\n'
     << "spatial_ratio=" << spatial_ratio << '\n'
     << "channel_ratio=" << channel_ratio << '\n'
     << "blocks=" << join4(blocks) << '\n'
     << "heads=" << join4(heads) << '\n'
     << "fixed_width=" << (fixed_width ? "true" : "false") << '\n';
  return os.str();
}

MARformerConfig MARformerConfig::from_text(std::string_view text) {
  MARformerConfig cfg;
  std::vector<std::string> seen;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = trim(text.substr(pos, eol - pos));
    pos = eol + 1;
    if (line.empty() || line.front() == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config: expected key=value, got '" + std::string(line) + "'");
    }
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view val = trim(line.substr(eq + 1));
    if (key == "base_channels") {
      cfg.base_channels = parse_int(val, key);
    } else if (key == "expansion") {
      try {
        std::size_t used = 0;
        cfg.expansion = std::stod(std::string(val), &used);
        if (used != val.size()) throw ConfigError("");
      } catch (const std::exception&) {
        throw ConfigError("config: bad real for 'expansion': " + std::string(val));
      }
    } else if (key == "ffn_kernel") {
      cfg.ffn_kernel = parse_int(val, key);
    } else if (key == "spatial_ratio") {
      cfg.spatial_ratio = parse_int(val, key);
    } else if (key == "channel_ratio") {
      cfg.channel_ratio = parse_int(val, key);
    } else if (key == "blocks") {
      cfg.blocks = parse_int4(val, key);
    } else if (key == "heads") {
      cfg.heads = parse_int4(val, key);
    } else if (key == "fixed_width") {
      if (val != "true" && val != "false") {
        throw ConfigError("config: fixed_width must be true or false");
      }
      cfg.fixed_width = val == "true";
    } else {
      throw ConfigError("config: unknown key '" + std::string(key) + "'");
    }
  }
  cfg.validate();
  return cfg;
}

MARformerConfig preset(std::string_view name) {
  MARformerConfig cfg;
  if (name == "L") {
    cfg.blocks = {1, 2, 4, 8};
    cfg.heads = {1, 2, 4, 8};
  } else if (name == "B") {
    cfg.blocks = {1, 2, 3, 4};
    cfg.heads = {1, 2, 4, 8};
  } else if (name == "T") {
    cfg.blocks = {1, 2, 3, 4};
    cfg.heads = {1, 1, 1, 1};
    cfg.fixed_width = true;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "' (expected L, B or T)");
  }
  return cfg;
}

}  // namespace marformer
