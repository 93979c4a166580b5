#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "marformer/model.hpp"
#include "marformer/mtsr.hpp"

namespace marformer {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'C', 'K'};
constexpr std::uint8_t kCheckpointVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is, const char* what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  }
  return v;
}

struct Header {
  MARformerConfig config;
  std::vector<ManifestEntry> entries;
};

Header read_header(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  const auto version = get<std::uint8_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto cfg_len = get<std::uint32_t>(is, "config length");
  std::string text(cfg_len, '\0');
  if (!is.read(text.data(), cfg_len)) throw CheckpointError("checkpoint truncated in config");
  Header h;
  try {
    h.config = MARformerConfig::from_text(text);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  const auto count = get<std::uint32_t>(is, "entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    ManifestEntry e;
    const auto name_len = get<std::uint16_t>(is, "name length");
    e.name.resize(name_len);
    if (!is.read(e.name.data(), name_len)) throw CheckpointError("checkpoint truncated in name");
    e.offset = get<std::uint64_t>(is, "offset");
    const auto dt = get<std::uint8_t>(is, "dtype");
    if (dt > 1) throw CheckpointError("checkpoint entry '" + e.name + "' has bad dtype");
    e.dtype = static_cast<DType>(dt);
    const auto rank = get<std::uint8_t>(is, "rank");
    for (int r = 0; r < rank; ++r) e.shape.push_back(get<std::uint32_t>(is, "extent"));
    h.entries.push_back(std::move(e));
  }
  return h;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  return is;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto params = model.parameters();
  const std::string text = model.config.to_text();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
  os.write(kMagic, 4);
  put<std::uint8_t>(os, kCheckpointVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    put<std::uint16_t>(os, static_cast<std::uint16_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint64_t>(os, offset);
    put<std::uint8_t>(os, static_cast<std::uint8_t>(p.tensor.dtype()));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    offset += mtsr::encoded_size(p.tensor);
  }
  for (const auto& p : params) mtsr::write(os, p.tensor);
  if (!os) throw CheckpointError("write failed for checkpoint " + path.string());
}

std::vector<ManifestEntry> read_checkpoint_manifest(const std::filesystem::path& path) {
  auto is = open_in(path);
  return read_header(is).entries;
}

MARformerConfig read_checkpoint_config(const std::filesystem::path& path) {
  auto is = open_in(path);
  return read_header(is).config;
}

Model load_checkpoint(const std::filesystem::path& path) {
  auto is = open_in(path);
  const Header h = read_header(is);
  const auto data_start = is.tellg();

  std::map<std::string, const ManifestEntry*> by_name;
  for (const auto& e : h.entries) {
    if (!by_name.emplace(e.name, &e).second) {
      throw CheckpointError("checkpoint has duplicate entry '" + e.name + "'");
    }
  }
  const DType dt = h.entries.empty() ? DType::f32 : h.entries.front().dtype;
  Model m = make_model_skeleton(h.config, dt);
  const auto params = m.parameters();
  if (params.size() != h.entries.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(h.entries.size()) +
                          " entries, model expects " + std::to_string(params.size()));
  }
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint missing parameter '" + p.name + "'");
    const ManifestEntry& e = *it->second;
    if (e.shape != p.tensor.shape() || e.dtype != dt) {
      throw CheckpointError("checkpoint entry '" + p.name + "' has shape " + shape_str(e.shape) +
                            ", expected " + shape_str(p.tensor.shape()));
    }
    is.seekg(data_start + static_cast<std::streamoff>(e.offset));
    Tensor t;
    try {
      t = mtsr::read(is);
    } catch (const std::exception& ex) {
      throw CheckpointError("checkpoint entry '" + p.name + "' unreadable: " + ex.what());
    }
    if (t.shape() != e.shape || t.dtype() != e.dtype) {
      throw CheckpointError("checkpoint entry '" + p.name + "' disagrees with its manifest");
    }
    Tensor dst = p.tensor;
    dst.copy_from(t);
  }
  return m;
}

Model load_checkpoint(const std::filesystem::path& path, const MARformerConfig& expected) {
  const MARformerConfig cfg = read_checkpoint_config(path);
  if (!(cfg == expected)) {
    throw CheckpointError("checkpoint config does not match the requested config:\n" +
                          cfg.to_text() + "vs\n" + expected.to_text());
  }
  return load_checkpoint(path);
}

}  // namespace marformer
