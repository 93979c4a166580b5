#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "marformer/config.hpp"
#include "marformer/tensor.hpp"

namespace marformer {

/// Dimension-reduced self-attention weights for one block.
///
/// Query and key branches run the 3x3 depth-wise conv first (stride =
/// spatial ratio) and then the 1x1 projection; the value branch runs the 1x1
/// projection (C -> C/r_c) and then a stride-1 3x3 depth-wise conv.
struct DrsaWeights {
  Tensor q_dw;    // [C, 1, 3, 3]
  Tensor q_pw;    // [C, C, 1, 1]
  Tensor k_dw;    // [C, 1, 3, 3]
  Tensor k_pw;    // [C', C, 1, 1]
  Tensor v_pw;    // [C', C, 1, 1]
  Tensor v_dw;    // [C', 1, 3, 3]
  Tensor proj;    // [C, C, 1, 1]
  /// One free scalar per head; the similarity scale is exp(-t) / sqrt(H'W').
  Tensor log_temperature;  // [heads]
};

struct FfnWeights {
  Tensor expand;  // [gC, C, 1, 1]
  Tensor dw;      // [gC, 1, p, p]
  Tensor shrink;  // [C, gC, 1, 1]
};

struct BlockWeights {
  Tensor norm1;  // [C]
  DrsaWeights attn;
  Tensor norm2;  // [C]
  FfnWeights ffn;
};

struct DrsaSettings {
  std::int64_t heads = 1;
  std::int64_t spatial_ratio = 2;
  std::int64_t channel_ratio = 2;
};

/// Intermediate values exposed for inspection by tests and tools.
struct DrsaTrace {
  Shape q_shape, k_shape, v_shape;  // per-branch [channels, spatial]
  Tensor attention;                 // [heads, d, d']
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

struct Model {
  MARformerConfig config;
  Tensor in_conv_weight, in_conv_bias;
  std::array<std::vector<BlockWeights>, kNumLevels> encoder;
  std::vector<BlockWeights> bottleneck;
  std::array<std::vector<BlockWeights>, kNumLevels> decoder;
  std::array<Tensor, kNumLevels> down;    // down[k]: level k -> k+1
  std::array<Tensor, kNumLevels> up;      // up[k]: level k+1 -> k
  std::array<Tensor, kNumLevels> reduce;  // decoder concat 2C -> C at level k
  Tensor out_conv_weight, out_conv_bias;

  /// Deterministic traversal, e.g. "enc1.block0.drsa.q_pw.weight".
  std::vector<NamedParameter> parameters() const;
  DType dtype() const { return in_conv_weight.dtype(); }
  void set_requires_grad(bool flag) const;
  void zero_grad() const;
};

/// All tensors allocated with the right shapes and zero-filled.
Model make_model_skeleton(const MARformerConfig& config, DType dtype = DType::f32);

/// Fan-in scaled uniform init; layer-norm gains 1; temperatures 0; the final
/// 3x3 conv zeroed so the fresh network returns its input.
Model build_model(const MARformerConfig& config, std::uint64_t seed, DType dtype = DType::f32);

std::int64_t count_params(const Model& model);

// Building blocks. All image tensors are [C, H, W].

Tensor drsa_forward(const Tensor& x, const DrsaWeights& w, const DrsaSettings& s,
                    DrsaTrace* trace = nullptr);
/// expand -> GELU -> depth-wise pxp -> GELU -> shrink (no skip).
Tensor p2ffn_core(const Tensor& x, const FfnWeights& w);
/// p2ffn_core(x) + x.
Tensor p2ffn_forward(const Tensor& x, const FfnWeights& w);
/// x1 = x + DRSA(LN(x)); out = x1 + P2FFN_core(LN(x1)).
Tensor block_forward(const Tensor& x, const BlockWeights& w, const DrsaSettings& s);
/// pixel_unshuffle(2) then 1x1 conv 4C -> C_next.
Tensor downsample(const Tensor& x, const Tensor& weight);
/// 1x1 conv C -> 4*C_prev then pixel_shuffle(2).
Tensor upsample(const Tensor& x, const Tensor& weight);

/// Residual R for input I ([1, H, W], H and W divisible by 8).
Tensor model_residual(const Model& model, const Tensor& image);
/// I + R.
Tensor model_forward(const Model& model, const Tensor& image);

// Checkpoints: "MTCK" | u8 version | u32 config length | config text |
// u32 entry count | entries (u16 name length, name, u64 offset, u8 dtype,
// u8 rank, rank x u32 extents) | concatenated MTSR1 tensors. Offsets are
// relative to the start of the tensor section. Integers little-endian.

struct ManifestEntry {
  std::string name;
  std::uint64_t offset;
  DType dtype;
  Shape shape;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
/// Also fails when the embedded config differs from `expected`.
Model load_checkpoint(const std::filesystem::path& path, const MARformerConfig& expected);
std::vector<ManifestEntry> read_checkpoint_manifest(const std::filesystem::path& path);
MARformerConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace marformer
