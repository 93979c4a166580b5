#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>

#include "marformer/mtsr.hpp"
#include "marformer/simulator.hpp"

using namespace marformer;
using namespace marformer::sim;
namespace fs = std::filesystem;

namespace {

// Raised-cosine disk, smooth enough for a clean roundtrip.
Tensor smooth_disk(std::int64_t n, double radius, double peak) {
  Tensor t({n, n}, DType::f64);
  const double c = 0.5 * double(n - 1);
  for (std::int64_t y = 0; y < n; ++y)
    for (std::int64_t x = 0; x < n; ++x) {
      const double r = std::hypot(double(x) - c, double(y) - c);
      if (r < radius) t.set(y * n + x, peak * 0.5 * (1.0 + std::cos(std::numbers::pi * r / radius)));
    }
  return t;
}

double psnr_ref(const Tensor& a, const Tensor& b, double range) {
  long double se = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const long double d = a.get(i) - b.get(i);
    se += d * d;
  }
  const double mse = double(se / a.numel());
  return 10.0 * std::log10(range * range / mse);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("marformer_sim_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("hu_to_mu reference values") {
  PhantomImage img{Tensor::from_vector({1, 5}, {-1000.0, 0.0, 2800.0, -3000.0, 9000.0}), 1.0};
  const Tensor mu = hu_to_mu(img);
  CHECK(mu.get(0) == 0.0);
  CHECK(mu.get(1) == doctest::Approx(0.0192).epsilon(1e-15));
  CHECK(mu.get(2) == doctest::Approx(0.07296).epsilon(1e-14));
  CHECK(mu.get(3) == 0.0);
  CHECK(mu.get(4) == doctest::Approx(0.07296).epsilon(1e-14));
  const Tensor back = mu_to_hu(mu);
  CHECK(back.get(1) == doctest::Approx(0.0).scale(1.0));
  CHECK(back.get(2) == doctest::Approx(2800.0));
}

TEST_CASE("radon forward basics") {
  SimParams p;
  p.n_angles = 36;
  const Sinogram z = radon_forward(Tensor({32, 32}, DType::f64), 1.0, p);
  CHECK(z.values.shape() == Shape{36, 46});
  for (auto v : z.values.to_vector()) CHECK(v == 0.0);

  // rotational symmetry of a centred smooth disk
  const Sinogram d = radon_forward(smooth_disk(64, 24.0, 0.05), 1.0, p);
  const std::int64_t nd = d.values.dim(1);
  double peak = 0.0, worst = 0.0;
  for (std::int64_t i = 0; i < nd; ++i) peak = std::max(peak, d.values.get(i));
  for (std::int64_t a = 1; a < 36; ++a)
    for (std::int64_t i = 0; i < nd; ++i)
      worst = std::max(worst, std::abs(d.values.get(a * nd + i) - d.values.get(i)));
  CHECK(worst / peak <= 1e-3);
  for (auto v : d.values.to_vector()) CHECK(v >= 0.0);

  // mass conservation of a single centred pixel
  Tensor one({33, 33}, DType::f64);
  one.set(16 * 33 + 16, 0.5);
  const double spacing = 0.8;
  const Sinogram s = radon_forward(one, spacing, p);
  const std::int64_t n1 = s.values.dim(1);
  for (std::int64_t a = 0; a < 36; ++a) {
    double mass = 0;
    for (std::int64_t i = 0; i < n1; ++i) mass += s.values.get(a * n1 + i);
    CHECK(mass == doctest::Approx(0.5 * spacing * spacing / spacing).epsilon(0.02));
  }
  CHECK_THROWS_AS(radon_forward(Tensor({4, 5}, DType::f64), 1.0, p), SimulationError);
  p.n_angles = 4;
  CHECK_THROWS_AS(radon_forward(one, 1.0, p), SimulationError);
}

TEST_CASE("radon and fbp are linear") {
  Rng rng(3);
  SimParams p;
  p.n_angles = 24;
  const Tensor x = rng.uniform_tensor({24, 24}, 0, 1), y = rng.uniform_tensor({24, 24}, 0, 1);
  Tensor mix({24, 24}, DType::f64);
  for (std::int64_t i = 0; i < mix.numel(); ++i) mix.set(i, 2.0 * x.get(i) - 0.5 * y.get(i));
  const auto rx = radon_forward(x, 1.0, p), ry = radon_forward(y, 1.0, p), rm = radon_forward(mix, 1.0, p);
  for (std::int64_t i = 0; i < rm.values.numel(); ++i) {
    const double want = 2.0 * rx.values.get(i) - 0.5 * ry.values.get(i);
    CHECK(std::abs(rm.values.get(i) - want) <= 1e-6 * std::max(1.0, std::abs(want)));
  }
  const Tensor fx = fbp_reconstruct(rx, 24, 24), fy = fbp_reconstruct(ry, 24, 24);
  const Tensor fm = fbp_reconstruct(rm, 24, 24);
  for (std::int64_t i = 0; i < fm.numel(); ++i) {
    CHECK(fm.get(i) == doctest::Approx(2.0 * fx.get(i) - 0.5 * fy.get(i)).epsilon(1e-5).scale(1.0));
  }
  const Tensor f0 = fbp_reconstruct(Sinogram{Tensor({24, 34}, DType::f64), 1.0}, 24, 24);
  for (auto v : f0.to_vector()) CHECK(v == 0.0);
}

TEST_CASE("fbp roundtrip of a smooth phantom") {
  SimParams p;
  p.n_angles = 360;
  const double spacing = 1.25;
  const Tensor disk = smooth_disk(128, 50.0, 0.06);
  const Tensor rec = fbp_reconstruct(radon_forward(disk, spacing, p), 128, 128);
  const double db = psnr_ref(rec, disk, 0.06);
  MESSAGE("roundtrip PSNR " << db);
  CHECK(db >= 30.0);
}

TEST_CASE("phantom and mask generator") {
  Rng rng(5);
  for (std::int64_t size : {32, 64, 96, 128}) {
    const PhantomImage ph = make_phantom(size, rng);
    CHECK(ph.pixels.shape() == Shape{size, size});
    CHECK(ph.spacing == doctest::Approx(160.0 / double(size)));
    double lo = 1e9, hi = -1e9;
    for (auto v : ph.pixels.to_vector()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    CHECK(lo >= -1000.0);
    CHECK(hi <= 2800.0);
    CHECK(hi >= 1700.0);
    for (int k = 0; k < 5; ++k) {
      const Tensor m = make_metal_mask(ph, rng);
      std::int64_t count = 0, on_tooth = 0;
      for (std::int64_t i = 0; i < m.numel(); ++i) {
        if (m.get(i) != 0.0) {
          ++count;
          on_tooth += ph.pixels.get(i) >= 1000.0;
        }
      }
      CHECK(count >= 10);
      CHECK(count <= 200);
      CHECK(on_tooth >= 1);
    }
  }
}

TEST_CASE("simulate_ma_pair contracts") {
  SimParams p;
  Rng rng(9);
  const PhantomImage ph = make_phantom(64, rng);

  // no metal, no hardening: roundtrip error only
  p.beam_hardening = 0.0;
  const MaPair plain = simulate_ma_pair(ph, Tensor({64, 64}, DType::f64), p);
  CHECK(bit_equal(plain.ma.pixels, plain.clean.pixels));
  CHECK(psnr_ref(plain.clean.pixels, ph.pixels, 3800.0) >= 30.0);
  p.beam_hardening = 0.3;
  CHECK(bit_equal(simulate_ma_pair(ph, Tensor({64, 64}, DType::f64), p).ma.pixels, plain.clean.pixels));

  // disk + small metal blob: streaks outside the mask
  p = SimParams{};
  PhantomImage disk{Tensor({64, 64}, DType::f64), 2.5};
  Tensor mask({64, 64}, DType::f64);
  for (std::int64_t y = 0; y < 64; ++y)
    for (std::int64_t x = 0; x < 64; ++x) {
      const double r = std::hypot(x - 31.5, y - 31.5);
      disk.pixels.set(y * 64 + x, r < 26 ? 40.0 : -1000.0);
      if (std::hypot(x - 40.0, y - 30.0) <= 3.0) mask.set(y * 64 + x, 1.0);
    }
  const MaPair ma = simulate_ma_pair(disk, mask, p);
  double mean = 0, sq = 0;
  std::int64_t n = 0, hot = 0;
  for (std::int64_t i = 0; i < mask.numel(); ++i) {
    if (mask.get(i) != 0.0) {
      CHECK(ma.ma.pixels.get(i) >= 2800.0);
      continue;
    }
    const double d = ma.ma.pixels.get(i) - ma.clean.pixels.get(i);
    mean += d;
    sq += d * d;
    ++n;
  }
  for (auto v : ma.ma.pixels.to_vector()) hot += v >= 2800.0;
  mean /= double(n);
  CHECK(std::sqrt(sq / double(n) - mean * mean) > 0.0);
  CHECK(psnr_ref(ma.ma.pixels, ma.clean.pixels, 3800.0) < 35.0);
  CHECK(hot >= 10);

  Tensor tiny({64, 64}, DType::f64);
  tiny.set(100, 1.0);
  CHECK_THROWS_AS(simulate_ma_pair(disk, tiny, p), SimulationError);
  CHECK_THROWS_AS(simulate_ma_pair(disk, Tensor({32, 32}, DType::f64), p), SimulationError);
}

TEST_CASE("make_dataset is deterministic and meets the MA criterion") {
  const auto a = scratch("a"), b = scratch("b");
  const auto ma = make_dataset(8, 64, 42, a);
  make_dataset(8, 64, 42, b);
  std::int64_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) files += e.path().extension() == ".mtsr";
  CHECK(files == 16);
  CHECK(fs::exists(a / kManifestName));
  CHECK(slurp(a / kManifestName) == slurp(b / kManifestName));
  const auto back = read_manifest(a);
  REQUIRE(back.entries.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    const auto& e = back.entries[i];
    CHECK(e.pair_id == static_cast<std::int64_t>(i));
    CHECK(e.split == (i % 4 == 3 ? "test" : "train"));
    CHECK(e.mask_pixel_count == ma.entries[i].mask_pixel_count);
    CHECK(e.mask_pixel_count >= 10);
    CHECK(slurp(a / e.ma_path) == slurp(b / e.ma_path));
    CHECK(slurp(a / e.clean_path) == slurp(b / e.clean_path));
    const Tensor img = mtsr::load(a / e.ma_path);
    CHECK(img.dtype() == DType::f32);
    CHECK(img.shape() == Shape{64, 64});
    std::int64_t hot = 0;
    for (auto v : img.to_vector()) hot += v >= 2800.0;
    CHECK(hot >= 10);
  }
  const auto c = scratch("c");
  make_dataset(2, 64, 43, c);
  CHECK(slurp(a / "pair_0000_ma.mtsr") != slurp(c / "pair_0000_ma.mtsr"));

  const auto blocker = scratch("file");
  { std::ofstream(blocker) << "x"; }
  CHECK_THROWS_AS(make_dataset(1, 64, 1, blocker / "sub"), SimulationError);
  CHECK_THROWS_AS(make_dataset(1, 60, 1, a), SimulationError);
  for (const auto& p : {a, b, c, blocker}) fs::remove_all(p);
}
