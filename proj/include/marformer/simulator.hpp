#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "marformer/rng.hpp"
#include "marformer/tensor.hpp"

namespace marformer::sim {

inline constexpr double kMuWater = 0.0192;  // 1/mm
inline constexpr double kHuMin = -1000.0;
inline constexpr double kHuMax = 2800.0;

class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// H x W image in HU, stored as f64.
struct PhantomImage {
  Tensor pixels;
  double spacing = 1.0;  // mm per pixel
};

/// Parallel-beam projections, angles uniform over [0, pi). Detector bins are
/// one pixel wide and centred on the rotation axis; each bin averages two rays
/// at +-1/4 pixel.
struct Sinogram {
  Tensor values;  // [n_angles, n_detectors]
  double spacing = 1.0;
};

struct SimParams {
  std::int64_t n_angles = 180;
  std::int64_t n_detectors = 0;  // 0: ceil(sqrt(2) * size)
  double metal_hu = 30000.0;
  double beam_hardening = 0.3;
  double metal_threshold = 2800.0;

  void validate() const;
  std::int64_t detectors_for(std::int64_t size) const;
};

/// mu = mu_water * (1 + HU/1000) after clipping HU to [-1000, 2800].
Tensor hu_to_mu(const PhantomImage& image);
/// Inverse map, clipped to [-1000, 2800].
Tensor mu_to_hu(const Tensor& mu);

Sinogram radon_forward(const Tensor& mu, double spacing, const SimParams& params);
Tensor fbp_reconstruct(const Sinogram& sino, std::int64_t height, std::int64_t width);

struct MaPair {
  PhantomImage ma;
  PhantomImage clean;
};

/// Inserts metal at `mask` (non-zero pixels), projects, hardens the rays that
/// cross metal, and reconstructs. The clean half is the metal-free image sent
/// through the same projector and FBP, so the pair differs only by metal.
MaPair simulate_ma_pair(const PhantomImage& clean, const Tensor& mask, const SimParams& params);

/// Jaw-like slice: soft-tissue ellipse, bone arch, teeth along the arch.
PhantomImage make_phantom(std::int64_t size, Rng& rng);
/// Small blob (10..200 pixels) centred on a tooth of `phantom`.
Tensor make_metal_mask(const PhantomImage& phantom, Rng& rng);

struct DatasetEntry {
  std::int64_t pair_id = 0;
  std::string clean_path;  // relative to the manifest directory
  std::string ma_path;
  std::string split;       // "train" or "test"
  std::int64_t mask_pixel_count = 0;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<DatasetEntry> entries;
};

inline constexpr const char* kManifestName = "manifest.csv";

/// Writes pair_NNNN_{clean,ma}.mtsr (f32 HU) plus manifest.csv. Pair i uses
/// seed ^ i; every fourth pair (i % 4 == 3) goes to the test split.
DatasetManifest make_dataset(std::int64_t n_pairs, std::int64_t size, std::uint64_t seed,
                             const std::filesystem::path& out_dir,
                             const SimParams& params = {});
DatasetManifest read_manifest(const std::filesystem::path& path_or_dir);

}  // namespace marformer::sim
