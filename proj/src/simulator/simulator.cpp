#include "marformer/simulator.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <sstream>

#include "marformer/mtsr.hpp"

namespace marformer::sim {

namespace {

std::mutex fftw_planner_mutex;

double sample_bilinear(const double* img, std::int64_t h, std::int64_t w, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto x0 = static_cast<std::int64_t>(fx), y0 = static_cast<std::int64_t>(fy);
  if (x0 < -1 || y0 < -1 || x0 >= w || y0 >= h) return 0.0;
  const double ax = x - fx, ay = y - fy;
  auto at = [&](std::int64_t yy, std::int64_t xx) {
    return (xx < 0 || yy < 0 || xx >= w || yy >= h) ? 0.0 : img[yy * w + xx];
  };
  return (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x0 + 1)) +
         ay * ((1 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1));
}

Tensor as_f64(const Tensor& t) { return t.dtype() == DType::f64 ? t : t.to(DType::f64); }

void require_image(const Tensor& t, const char* who) {
  if (t.rank() != 2) throw SimulationError(std::string(who) + ": expected a 2-D image");
}

// Ram-Lak filter for unit detector spacing, as the DFT of its sampled
// spatial kernel: h[0] = 1/4, h[odd n] = -1/(pi n)^2, h[even n] = 0.
class RampFilter {
 public:
  explicit RampFilter(std::int64_t n_det) : n_det_(n_det) {
    len_ = 1;
    while (len_ < 2 * n_det) len_ <<= 1;
    buf_ = fftw_alloc_real(static_cast<std::size_t>(len_));
    spec_ = fftw_alloc_complex(static_cast<std::size_t>(len_ / 2 + 1));
    {
      std::lock_guard lock(fftw_planner_mutex);
      fwd_ = fftw_plan_dft_r2c_1d(static_cast<int>(len_), buf_, spec_, FFTW_ESTIMATE);
      inv_ = fftw_plan_dft_c2r_1d(static_cast<int>(len_), spec_, buf_, FFTW_ESTIMATE);
    }
    std::fill(buf_, buf_ + len_, 0.0);
    buf_[0] = 0.25;
    for (std::int64_t n = 1; n < n_det; n += 2) {
      const double v = -1.0 / (std::numbers::pi * std::numbers::pi * double(n) * double(n));
      buf_[n] = v;
      buf_[len_ - n] = v;
    }
    fftw_execute(fwd_);
    response_.resize(static_cast<std::size_t>(len_ / 2 + 1));
    for (std::size_t k = 0; k < response_.size(); ++k) response_[k] = spec_[k][0];
  }
  ~RampFilter() {
    std::lock_guard lock(fftw_planner_mutex);
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
    fftw_free(buf_);
    fftw_free(spec_);
  }
  RampFilter(const RampFilter&) = delete;
  RampFilter& operator=(const RampFilter&) = delete;

  void apply(const double* in, double* out) {
    std::fill(buf_, buf_ + len_, 0.0);
    std::copy(in, in + n_det_, buf_);
    fftw_execute(fwd_);
    for (std::size_t k = 0; k < response_.size(); ++k) {
      spec_[k][0] *= response_[k];
      spec_[k][1] *= response_[k];
    }
    fftw_execute(inv_);
    const double norm = 1.0 / double(len_);
    for (std::int64_t i = 0; i < n_det_; ++i) out[i] = buf_[i] * norm;
  }

 private:
  std::int64_t n_det_, len_;
  double* buf_;
  fftw_complex* spec_;
  fftw_plan fwd_, inv_;
  std::vector<double> response_;
};

void gaussian_blur(std::vector<double>& img, std::int64_t h, std::int64_t w, double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double ks = 0;
  for (int i = -r; i <= r; ++i) ks += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= ks;
  std::vector<double> tmp(img.size());
  // clamp-to-edge on both passes
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * img[y * w + std::clamp<std::int64_t>(x + i, 0, w - 1)];
      tmp[y * w + x] = s;
    }
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * tmp[std::clamp<std::int64_t>(y + i, 0, h - 1) * w + x];
      img[y * w + x] = s;
    }
}

std::string pair_file(std::int64_t i, const char* kind) {
  std::ostringstream os;
  os << "pair_" << std::setw(4) << std::setfill('0') << i << '_' << kind << ".mtsr";
  return os.str();
}

}  // namespace

void SimParams::validate() const {
  if (n_angles < 8) throw SimulationError("n_angles must be at least 8");
  if (!(beam_hardening >= 0.0)) throw SimulationError("beam hardening strength must be >= 0");
  if (n_detectors < 0) throw SimulationError("n_detectors must be >= 0");
}

std::int64_t SimParams::detectors_for(std::int64_t size) const {
  if (n_detectors > 0) return n_detectors;
  return static_cast<std::int64_t>(std::ceil(std::numbers::sqrt2 * double(size)));
}

Tensor hu_to_mu(const PhantomImage& image) {
  Tensor mu = as_f64(image.pixels).clone();
  double* d = mu.data<double>().data();
  for (std::int64_t i = 0; i < mu.numel(); ++i) {
    d[i] = kMuWater * (1.0 + std::clamp(d[i], kHuMin, kHuMax) / 1000.0);
  }
  return mu;
}

Tensor mu_to_hu(const Tensor& mu) {
  Tensor hu = as_f64(mu).clone();
  double* d = hu.data<double>().data();
  for (std::int64_t i = 0; i < hu.numel(); ++i) {
    d[i] = std::clamp(1000.0 * (d[i] / kMuWater - 1.0), kHuMin, kHuMax);
  }
  return hu;
}

Sinogram radon_forward(const Tensor& mu_in, double spacing, const SimParams& params) {
  params.validate();
  require_image(mu_in, "radon_forward");
  if (mu_in.dim(0) != mu_in.dim(1)) throw SimulationError("radon_forward: image must be square");
  const Tensor mu = as_f64(mu_in);
  const std::int64_t n = mu.dim(0);
  const std::int64_t na = params.n_angles, nd = params.detectors_for(n);
  const double centre = 0.5 * double(n - 1), det_centre = 0.5 * double(nd - 1);
  const double half_len = 0.5 * double(nd) + 1.0;
  const auto n_steps = static_cast<std::int64_t>(4.0 * half_len) + 1;
  const double* img = mu.data<double>().data();

  Sinogram sino{Tensor({na, nd}, DType::f64), spacing};
  double* out = sino.values.data<double>().data();
#pragma omp parallel for schedule(static)
  for (std::int64_t a = 0; a < na; ++a) {
    const double th = std::numbers::pi * double(a) / double(na);
    const double c = std::cos(th), s = std::sin(th);
    for (std::int64_t d = 0; d < nd; ++d) {
      // Two rays per bin at +-1/4 pixel model the bin width and cancel the
      // first aliasing term of the bilinear footprint.
      double sum = 0.0;
      for (const double off : {-0.25, 0.25}) {
        const double t = double(d) - det_centre + off;
        for (std::int64_t k = 0; k < n_steps; ++k) {
          const double u = -half_len + 0.5 * double(k);
          sum += sample_bilinear(img, n, n, t * c - u * s + centre, t * s + u * c + centre);
        }
      }
      out[a * nd + d] = sum * 0.25 * spacing;
    }
  }
  return sino;
}

Tensor fbp_reconstruct(const Sinogram& sino, std::int64_t height, std::int64_t width) {
  require_image(sino.values, "fbp_reconstruct");
  if (height <= 0 || width <= 0) throw SimulationError("fbp_reconstruct: bad output size");
  const Tensor vals = as_f64(sino.values);
  const std::int64_t na = vals.dim(0), nd = vals.dim(1);
  if (double(nd) < std::hypot(double(height), double(width)) - 1.0) {
    throw SimulationError("fbp_reconstruct: detector row too short for the output image");
  }
  std::vector<double> filtered(static_cast<std::size_t>(na * nd));
  {
    RampFilter ramp(nd);
    for (std::int64_t a = 0; a < na; ++a) ramp.apply(vals.data<double>().data() + a * nd, &filtered[a * nd]);
  }
  std::vector<double> cs(na), sn(na);
  for (std::int64_t a = 0; a < na; ++a) {
    const double th = std::numbers::pi * double(a) / double(na);
    cs[a] = std::cos(th);
    sn[a] = std::sin(th);
  }
  const double cx = 0.5 * double(width - 1), cy = 0.5 * double(height - 1);
  const double det_centre = 0.5 * double(nd - 1);
  const double scale = std::numbers::pi / double(na) / sino.spacing;
  Tensor out({height, width}, DType::f64);
  double* o = out.data<double>().data();
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < height; ++r) {
    const double y = double(r) - cy;
    for (std::int64_t c = 0; c < width; ++c) {
      const double x = double(c) - cx;
      double sum = 0.0;
      for (std::int64_t a = 0; a < na; ++a) {
        const double u = x * cs[a] + y * sn[a] + det_centre;
        const double fu = std::floor(u);
        const auto i = static_cast<std::int64_t>(fu);
        if (i < 0 || i + 1 >= nd) continue;
        const double f = u - fu;
        sum += (1 - f) * filtered[a * nd + i] + f * filtered[a * nd + i + 1];
      }
      o[r * width + c] = sum * scale;
    }
  }
  return out;
}

MaPair simulate_ma_pair(const PhantomImage& clean, const Tensor& mask, const SimParams& params) {
  params.validate();
  require_image(clean.pixels, "simulate_ma_pair");
  if (mask.shape() != clean.pixels.shape()) {
    throw SimulationError("simulate_ma_pair: mask shape " + shape_str(mask.shape()) +
                          " differs from image " + shape_str(clean.pixels.shape()));
  }
  const std::int64_t h = clean.pixels.dim(0), w = clean.pixels.dim(1);
  Tensor mu = hu_to_mu(clean);
  Tensor metal({h, w}, DType::f64);
  const double metal_mu = kMuWater * (1.0 + params.metal_hu / 1000.0);
  std::int64_t count = 0;
  for (std::int64_t i = 0; i < mu.numel(); ++i) {
    if (mask.get(i) != 0.0) {
      mu.set(i, metal_mu);
      metal.set(i, 1.0);
      ++count;
    }
  }
  if (count > 0 && count < 10) {
    throw SimulationError("simulate_ma_pair: metal mask has " + std::to_string(count) +
                          " pixels, at least 10 required");
  }
  Sinogram sino = radon_forward(mu, clean.spacing, params);
  if (count > 0 && params.beam_hardening > 0.0) {
    const Sinogram hit = radon_forward(metal, 1.0, params);
    double* s = sino.values.data<double>().data();
    const double* m = hit.values.data<double>().data();
    for (std::int64_t i = 0; i < sino.values.numel(); ++i) {
      if (m[i] > 1e-9) s[i] += params.beam_hardening * s[i] * s[i] / (1.0 + s[i]);
    }
  }
  MaPair pair;
  pair.ma = {mu_to_hu(fbp_reconstruct(sino, h, w)), clean.spacing};
  const Sinogram clean_sino = radon_forward(hu_to_mu(clean), clean.spacing, params);
  pair.clean = {mu_to_hu(fbp_reconstruct(clean_sino, h, w)), clean.spacing};
  return pair;
}

PhantomImage make_phantom(std::int64_t size, Rng& rng) {
  if (size < 16) throw SimulationError("make_phantom: size must be at least 16");
  const double n = double(size), c0 = 0.5 * (n - 1);
  std::vector<double> img(static_cast<std::size_t>(size * size), kHuMin);

  const double head_a = rng.uniform(0.40, 0.45), head_b = rng.uniform(0.36, 0.42);
  const double tissue = rng.uniform(20.0, 60.0);
  const double arch_v = rng.uniform(-0.04, 0.04);
  const double arch_a = rng.uniform(0.27, 0.31), arch_b = rng.uniform(0.25, 0.29);
  const double arch_w = rng.uniform(0.05, 0.07);
  const double bone = rng.uniform(900.0, 1200.0);
  const double air_v = rng.uniform(0.14, 0.22);

  struct Tooth {
    double u, v, r, hu;
  };
  std::vector<Tooth> teeth;
  const auto n_teeth = rng.uniform_int(8, 12);
  const double mid_a = arch_a - 0.5 * arch_w, mid_b = arch_b - 0.5 * arch_w;
  for (std::int64_t t = 0; t < n_teeth; ++t) {
    const double phi = std::numbers::pi + 0.3 + (std::numbers::pi - 0.6) * (double(t) + 0.5) / double(n_teeth);
    // at least 1.5 px so small slices keep their teeth after the blur
    const double radius = std::max(rng.uniform(0.028, 0.04), 1.5 / n);
    teeth.push_back({mid_a * std::cos(phi), arch_v + mid_b * std::sin(phi), radius, rng.uniform(1800.0, 2500.0)});
  }

  auto in_ellipse = [](double u, double v, double a, double b) { return u * u / (a * a) + v * v / (b * b) <= 1.0; };
  for (std::int64_t r = 0; r < size; ++r) {
    for (std::int64_t c = 0; c < size; ++c) {
      const double u = (double(c) - c0) / n, v = (double(r) - c0) / n;
      double hu = kHuMin;
      if (in_ellipse(u, v, head_a, head_b)) hu = tissue;
      if (in_ellipse(u, v - air_v, 0.06, 0.04)) hu = kHuMin;
      const double va = v - arch_v;
      if (va <= 0.02 && in_ellipse(u, va, arch_a, arch_b) &&
          !in_ellipse(u, va, arch_a - arch_w, arch_b - arch_w)) {
        hu = bone;
      }
      for (const auto& t : teeth) {
        if (in_ellipse(u - t.u, v - t.v, t.r, t.r)) hu = t.hu;
      }
      img[r * size + c] = hu;
    }
  }
  gaussian_blur(img, size, size, std::min(1.0, n / 64.0));
  Tensor px({size, size}, DType::f64);
  double* d = px.data<double>().data();
  for (std::size_t i = 0; i < img.size(); ++i) d[i] = std::clamp(img[i], kHuMin, kHuMax);
  return {px, 160.0 / n};
}

Tensor make_metal_mask(const PhantomImage& phantom, Rng& rng) {
  require_image(phantom.pixels, "make_metal_mask");
  const Tensor px = as_f64(phantom.pixels);
  const std::int64_t h = px.dim(0), w = px.dim(1);
  std::vector<std::int64_t> tooth_pixels;
  for (std::int64_t i = 0; i < px.numel(); ++i) {
    if (px.get(i) >= 1700.0) tooth_pixels.push_back(i);
  }
  if (tooth_pixels.empty()) throw SimulationError("make_metal_mask: phantom has no tooth pixels");
  const double r_max = std::clamp(0.05 * double(std::min(h, w)), 2.5, 7.5);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const auto centre = tooth_pixels[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(tooth_pixels.size()) - 1))];
    const double cy = double(centre / w), cx = double(centre % w);
    const double ra = rng.uniform(1.8, r_max), rb = rng.uniform(1.8, r_max);
    const double ang = rng.uniform(0.0, std::numbers::pi);
    const double ca = std::cos(ang), sa = std::sin(ang);
    Tensor mask({h, w}, DType::f64);
    std::int64_t count = 0;
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        const double dx = double(x) - cx, dy = double(y) - cy;
        const double p = dx * ca + dy * sa, q = -dx * sa + dy * ca;
        if (p * p / (ra * ra) + q * q / (rb * rb) <= 1.0) {
          mask.set(y * w + x, 1.0);
          ++count;
        }
      }
    }
    if (count >= 10 && count <= 200) return mask;
  }
  throw SimulationError("make_metal_mask: could not place a 10..200 pixel blob");
}

DatasetManifest make_dataset(std::int64_t n_pairs, std::int64_t size, std::uint64_t seed,
                             const std::filesystem::path& out_dir, const SimParams& params) {
  params.validate();
  if (n_pairs <= 0) throw SimulationError("make_dataset: n_pairs must be positive");
  if (size <= 0 || size % 8 != 0) throw SimulationError("make_dataset: size must be a positive multiple of 8");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw SimulationError("make_dataset: cannot create directory " + out_dir.string());
  }
  DatasetManifest manifest{out_dir, {}};
  for (std::int64_t i = 0; i < n_pairs; ++i) {
    Rng rng(seed ^ static_cast<std::uint64_t>(i));
    const PhantomImage phantom = make_phantom(size, rng);
    const Tensor mask = make_metal_mask(phantom, rng);
    const MaPair pair = simulate_ma_pair(phantom, mask, params);
    DatasetEntry e;
    e.pair_id = i;
    e.clean_path = pair_file(i, "clean");
    e.ma_path = pair_file(i, "ma");
    e.split = i % 4 == 3 ? "test" : "train";
    for (std::int64_t k = 0; k < mask.numel(); ++k) e.mask_pixel_count += mask.get(k) != 0.0;
    try {
      mtsr::save(out_dir / e.clean_path, pair.clean.pixels.to(DType::f32));
      mtsr::save(out_dir / e.ma_path, pair.ma.pixels.to(DType::f32));
    } catch (const std::exception& ex) {
      throw SimulationError(std::string("make_dataset: ") + ex.what());
    }
    manifest.entries.push_back(e);
  }
  std::ofstream os(out_dir / kManifestName, std::ios::trunc);
  if (!os) throw SimulationError("make_dataset: cannot write manifest in " + out_dir.string());
  os << "pair_id,clean_path,ma_path,split,mask_pixel_count\n";
  for (const auto& e : manifest.entries) {
    os << e.pair_id << ',' << e.clean_path << ',' << e.ma_path << ',' << e.split << ','
       << e.mask_pixel_count << '\n';
  }
  if (!os) throw SimulationError("make_dataset: failed writing manifest");
  return manifest;
}

DatasetManifest read_manifest(const std::filesystem::path& path_or_dir) {
  const auto path = std::filesystem::is_directory(path_or_dir) ? path_or_dir / kManifestName : path_or_dir;
  std::ifstream is(path);
  if (!is) throw SimulationError("cannot open manifest " + path.string());
  DatasetManifest m{path.parent_path(), {}};
  std::string line;
  if (!std::getline(is, line) || line.rfind("pair_id,", 0) != 0) {
    throw SimulationError("manifest " + path.string() + " has no header");
  }
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw SimulationError("manifest line malformed: " + line);
    try {
      m.entries.push_back({std::stoll(f[0]), f[1], f[2], f[3], std::stoll(f[4])});
    } catch (const std::logic_error&) {
      throw SimulationError("manifest line malformed: " + line);
    }
  }
  return m;
}

}  // namespace marformer::sim
