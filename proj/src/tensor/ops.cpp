#include "marformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "marformer/autograd.hpp"

namespace marformer::ops {

namespace {

using detail::record;

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw TensorError(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
                      dtype_name(b.dtype()) + ")");
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
}

// ---------------------------------------------------------------------------
// conv2d

struct ConvGeom {
  std::int64_t n, cin, h, w, cout, k, oh, ow, stride, pad, groups, cin_g, cout_g;
};

ConvGeom conv_geometry(const Shape& in4, const Shape& wshape, const Conv2dOptions& o) {
  if (wshape.size() != 4) {
    throw TensorError("conv2d: weight must be rank 4, got " + shape_str(wshape));
  }
  ConvGeom g{};
  g.n = in4[0];
  g.cin = in4[1];
  g.h = in4[2];
  g.w = in4[3];
  g.cout = wshape[0];
  g.k = wshape[2];
  g.stride = o.stride;
  g.pad = o.padding;
  g.groups = o.groups;
  if (wshape[2] != wshape[3] || g.k % 2 == 0) {
    throw TensorError("conv2d: kernel must be square with odd extent, got " + shape_str(wshape));
  }
  if (o.groups <= 0 || o.stride <= 0 || o.padding < 0) {
    throw TensorError("conv2d: invalid stride/padding/groups");
  }
  if (g.cin % g.groups != 0 || g.cout % g.groups != 0) {
    throw TensorError("conv2d: groups " + std::to_string(g.groups) + " must divide C_in " +
                      std::to_string(g.cin) + " and C_out " + std::to_string(g.cout));
  }
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (wshape[1] != g.cin_g) {
    throw TensorError("conv2d: weight " + shape_str(wshape) + " incompatible with input channels " +
                      std::to_string(g.cin) + " and groups " + std::to_string(g.groups));
  }
  const std::int64_t span_h = g.h + 2 * g.pad - g.k;
  const std::int64_t span_w = g.w + 2 * g.pad - g.k;
  if (span_h < 0 || span_w < 0) {
    throw TensorError("conv2d: kernel larger than padded input");
  }
  g.oh = span_h / g.stride + 1;
  g.ow = span_w / g.stride + 1;
  return g;
}

// Range of output columns ox with 0 <= ox*stride - pad + kx < W.
inline void valid_range(std::int64_t out_len, std::int64_t in_len, std::int64_t stride,
                        std::int64_t offset, std::int64_t& lo, std::int64_t& hi) {
  // ix = ox*stride + offset
  lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  const std::int64_t last = in_len - 1 - offset;
  hi = last < 0 ? 0 : std::min(out_len, last / stride + 1);
  if (hi < lo) hi = lo;
}

// 1x1, stride 1, no padding: each plane is a flat vector and the conv is a
// small matrix product over channels.
inline bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

template <typename T>
void pointwise_forward(const ConvGeom& g, const T* x, const T* w, const T* bias, T* y) {
  const std::int64_t plane = g.h * g.w;
#pragma omp parallel for schedule(static)
  for (std::int64_t job = 0; job < g.n * g.cout; ++job) {
    const std::int64_t n = job / g.cout;
    const std::int64_t co = job % g.cout;
    const std::int64_t grp = co / g.cout_g;
    std::vector<double> acc(static_cast<std::size_t>(plane), bias ? double(bias[co]) : 0.0);
    double* a = acc.data();
    for (std::int64_t cil = 0; cil < g.cin_g; ++cil) {
      const T* xin = x + (n * g.cin + grp * g.cin_g + cil) * plane;
      const double wv = w[co * g.cin_g + cil];
      for (std::int64_t i = 0; i < plane; ++i) a[i] += wv * double(xin[i]);
    }
    T* out = y + (n * g.cout + co) * plane;
    for (std::int64_t i = 0; i < plane; ++i) out[i] = static_cast<T>(a[i]);
  }
}

template <typename T>
void pointwise_backward_input(const ConvGeom& g, const T* gy, const T* w, T* gx) {
  const std::int64_t plane = g.h * g.w;
#pragma omp parallel for schedule(static)
  for (std::int64_t job = 0; job < g.n * g.cin; ++job) {
    const std::int64_t n = job / g.cin;
    const std::int64_t ci = job % g.cin;
    const std::int64_t grp = ci / g.cin_g;
    const std::int64_t cil = ci % g.cin_g;
    std::vector<double> acc(static_cast<std::size_t>(plane), 0.0);
    double* a = acc.data();
    for (std::int64_t col = 0; col < g.cout_g; ++col) {
      const std::int64_t co = grp * g.cout_g + col;
      const T* go = gy + (n * g.cout + co) * plane;
      const double wv = w[co * g.cin_g + cil];
      for (std::int64_t i = 0; i < plane; ++i) a[i] += wv * double(go[i]);
    }
    T* dst = gx + (n * g.cin + ci) * plane;
    for (std::int64_t i = 0; i < plane; ++i) dst[i] = static_cast<T>(a[i]);
  }
}

template <typename T>
void pointwise_backward_weight(const ConvGeom& g, const T* gy, const T* x, T* gw) {
  const std::int64_t plane = g.h * g.w;
#pragma omp parallel for schedule(static)
  for (std::int64_t co = 0; co < g.cout; ++co) {
    const std::int64_t grp = co / g.cout_g;
    for (std::int64_t cil = 0; cil < g.cin_g; ++cil) {
      const std::int64_t ci = grp * g.cin_g + cil;
      double s = 0.0;
      for (std::int64_t n = 0; n < g.n; ++n) {
        const T* go = gy + (n * g.cout + co) * plane;
        const T* xin = x + (n * g.cin + ci) * plane;
#pragma omp simd reduction(+ : s)
        for (std::int64_t i = 0; i < plane; ++i) s += double(go[i]) * double(xin[i]);
      }
      gw[co * g.cin_g + cil] = static_cast<T>(s);
    }
  }
}

template <typename T>
void conv_forward_kernel(const ConvGeom& g, const T* x, const T* w, const T* bias, T* y) {
  if (is_pointwise(g)) return pointwise_forward(g, x, w, bias, y);
  const std::int64_t out_plane = g.oh * g.ow;
  const std::int64_t in_plane = g.h * g.w;
#pragma omp parallel for schedule(static)
  for (std::int64_t job = 0; job < g.n * g.cout; ++job) {
    const std::int64_t n = job / g.cout;
    const std::int64_t co = job % g.cout;
    const std::int64_t grp = co / g.cout_g;
    std::vector<double> acc(static_cast<std::size_t>(out_plane), bias ? double(bias[co]) : 0.0);
    for (std::int64_t cil = 0; cil < g.cin_g; ++cil) {
      const std::int64_t ci = grp * g.cin_g + cil;
      const T* xin = x + (n * g.cin + ci) * in_plane;
      const T* wk = w + (co * g.cin_g + cil) * g.k * g.k;
      for (std::int64_t ky = 0; ky < g.k; ++ky) {
        std::int64_t oy0, oy1;
        valid_range(g.oh, g.h, g.stride, ky - g.pad, oy0, oy1);
        for (std::int64_t kx = 0; kx < g.k; ++kx) {
          const double wv = wk[ky * g.k + kx];
          std::int64_t ox0, ox1;
          valid_range(g.ow, g.w, g.stride, kx - g.pad, ox0, ox1);
          for (std::int64_t oy = oy0; oy < oy1; ++oy) {
            const T* row = xin + (oy * g.stride - g.pad + ky) * g.w;
            const std::int64_t shift = kx - g.pad;
            double* arow = acc.data() + oy * g.ow;
            if (g.stride == 1) {
              for (std::int64_t ox = ox0; ox < ox1; ++ox) arow[ox] += wv * double(row[ox + shift]);
            } else {
              for (std::int64_t ox = ox0; ox < ox1; ++ox) {
                arow[ox] += wv * double(row[ox * g.stride + shift]);
              }
            }
          }
        }
      }
    }
    T* out = y + (n * g.cout + co) * out_plane;
    for (std::int64_t i = 0; i < out_plane; ++i) out[i] = static_cast<T>(acc[i]);
  }
}

template <typename T>
void conv_backward_input_kernel(const ConvGeom& g, const T* gy, const T* w, T* gx) {
  if (is_pointwise(g)) return pointwise_backward_input(g, gy, w, gx);
  const std::int64_t out_plane = g.oh * g.ow;
  const std::int64_t in_plane = g.h * g.w;
#pragma omp parallel for schedule(static)
  for (std::int64_t job = 0; job < g.n * g.cin; ++job) {
    const std::int64_t n = job / g.cin;
    const std::int64_t ci = job % g.cin;
    const std::int64_t grp = ci / g.cin_g;
    const std::int64_t cil = ci % g.cin_g;
    std::vector<double> acc(static_cast<std::size_t>(in_plane), 0.0);
    for (std::int64_t col = 0; col < g.cout_g; ++col) {
      const std::int64_t co = grp * g.cout_g + col;
      const T* go = gy + (n * g.cout + co) * out_plane;
      const T* wk = w + (co * g.cin_g + cil) * g.k * g.k;
      for (std::int64_t ky = 0; ky < g.k; ++ky) {
        std::int64_t oy0, oy1;
        valid_range(g.oh, g.h, g.stride, ky - g.pad, oy0, oy1);
        for (std::int64_t kx = 0; kx < g.k; ++kx) {
          const double wv = wk[ky * g.k + kx];
          std::int64_t ox0, ox1;
          valid_range(g.ow, g.w, g.stride, kx - g.pad, ox0, ox1);
          for (std::int64_t oy = oy0; oy < oy1; ++oy) {
            double* arow = acc.data() + (oy * g.stride - g.pad + ky) * g.w;
            const std::int64_t shift = kx - g.pad;
            const T* grow = go + oy * g.ow;
            if (g.stride == 1) {
              for (std::int64_t ox = ox0; ox < ox1; ++ox) arow[ox + shift] += wv * double(grow[ox]);
            } else {
              for (std::int64_t ox = ox0; ox < ox1; ++ox) {
                arow[ox * g.stride + shift] += wv * double(grow[ox]);
              }
            }
          }
        }
      }
    }
    T* dst = gx + (n * g.cin + ci) * in_plane;
    for (std::int64_t i = 0; i < in_plane; ++i) dst[i] = static_cast<T>(acc[i]);
  }
}

template <typename T>
void conv_backward_weight_kernel(const ConvGeom& g, const T* gy, const T* x, T* gw) {
  if (is_pointwise(g)) return pointwise_backward_weight(g, gy, x, gw);
  const std::int64_t out_plane = g.oh * g.ow;
  const std::int64_t in_plane = g.h * g.w;
#pragma omp parallel for schedule(static)
  for (std::int64_t job = 0; job < g.cout * g.cin_g; ++job) {
    const std::int64_t co = job / g.cin_g;
    const std::int64_t cil = job % g.cin_g;
    const std::int64_t ci = (co / g.cout_g) * g.cin_g + cil;
    // per-column partial sums, reduced once per tap
    std::vector<double> lane(static_cast<std::size_t>(g.ow));
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      std::int64_t oy0, oy1;
      valid_range(g.oh, g.h, g.stride, ky - g.pad, oy0, oy1);
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        std::int64_t ox0, ox1;
        valid_range(g.ow, g.w, g.stride, kx - g.pad, ox0, ox1);
        const std::int64_t shift = kx - g.pad;
        std::fill(lane.begin(), lane.end(), 0.0);
        double* l = lane.data();
        for (std::int64_t n = 0; n < g.n; ++n) {
          const T* go = gy + (n * g.cout + co) * out_plane;
          const T* xin = x + (n * g.cin + ci) * in_plane;
          for (std::int64_t oy = oy0; oy < oy1; ++oy) {
            const T* row = xin + (oy * g.stride - g.pad + ky) * g.w;
            const T* grow = go + oy * g.ow;
            if (g.stride == 1) {
              for (std::int64_t ox = ox0; ox < ox1; ++ox) l[ox] += double(grow[ox]) * double(row[ox + shift]);
            } else {
              for (std::int64_t ox = ox0; ox < ox1; ++ox) {
                l[ox] += double(grow[ox]) * double(row[ox * g.stride + shift]);
              }
            }
          }
        }
        double s = 0.0;
        for (std::int64_t ox = ox0; ox < ox1; ++ox) s += l[ox];
        gw[((co * g.cin_g + cil) * g.k + ky) * g.k + kx] = static_cast<T>(s);
      }
    }
  }
}

Shape as_batched(const Shape& s) {
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  if (s.size() == 4) return s;
  throw TensorError("expected [C,H,W] or [N,C,H,W] tensor, got " + shape_str(s));
}

// ---------------------------------------------------------------------------
// shuffles

template <typename T>
void unshuffle_kernel(const T* in, T* out, std::int64_t batch, std::int64_t c, std::int64_t h,
                      std::int64_t w, std::int64_t r) {
  const std::int64_t oh = h / r, ow = w / r;
  for (std::int64_t n = 0; n < batch; ++n) {
    const T* src = in + n * c * h * w;
    T* dst = out + n * c * h * w;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t dy = 0; dy < r; ++dy) {
        for (std::int64_t dx = 0; dx < r; ++dx) {
          const std::int64_t oc = ch * r * r + dy * r + dx;
          for (std::int64_t oy = 0; oy < oh; ++oy) {
            for (std::int64_t ox = 0; ox < ow; ++ox) {
              dst[(oc * oh + oy) * ow + ox] = src[(ch * h + oy * r + dy) * w + ox * r + dx];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void shuffle_kernel(const T* in, T* out, std::int64_t batch, std::int64_t c_out, std::int64_t h,
                    std::int64_t w, std::int64_t r) {
  // in: [c_out*r*r, h, w] -> out: [c_out, h*r, w*r]
  const std::int64_t oh = h * r, ow = w * r;
  for (std::int64_t n = 0; n < batch; ++n) {
    const T* src = in + n * c_out * oh * ow;
    T* dst = out + n * c_out * oh * ow;
    for (std::int64_t ch = 0; ch < c_out; ++ch) {
      for (std::int64_t dy = 0; dy < r; ++dy) {
        for (std::int64_t dx = 0; dx < r; ++dx) {
          const std::int64_t ic = ch * r * r + dy * r + dx;
          for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) {
              dst[(ch * oh + y * r + dy) * ow + x * r + dx] = src[(ic * h + y) * w + x];
            }
          }
        }
      }
    }
  }
}

struct ImageDims {
  std::int64_t batch, c, h, w;
  bool batched;
};

ImageDims image_dims(const Tensor& t, const char* op) {
  const auto& s = t.shape();
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  throw TensorError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + shape_str(s));
}

Shape image_shape(const ImageDims& d, std::int64_t c, std::int64_t h, std::int64_t w) {
  if (d.batched) return {d.batch, c, h, w};
  return {c, h, w};
}

template <typename Fn>
Tensor unary_map(const Tensor& a, Fn&& fn) {
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>();
    auto y = out.data<T>();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<T>(fn(double(x[i])));
  });
  return out;
}

template <typename Fn>
Tensor binary_map(const Tensor& a, const Tensor& b, Fn&& fn) {
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>();
    auto z = b.data<T>();
    auto y = out.data<T>();
    for (std::size_t i = 0; i < x.size(); ++i) {
      y[i] = static_cast<T>(fn(double(x[i]), double(z[i])));
    }
  });
  return out;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0); }
double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias,
              Conv2dOptions opts) {
  require_same_dtype(input, weight, "conv2d");
  const bool batched = input.rank() == 4;
  const Shape in4 = as_batched(input.shape());
  const ConvGeom g = conv_geometry(in4, weight.shape(), opts);
  if (bias) {
    require_same_dtype(input, *bias, "conv2d");
    if (bias->shape() != Shape{g.cout}) {
      throw TensorError("conv2d: bias shape " + shape_str(bias->shape()) + " must be [C_out]");
    }
  }
  Shape out_shape = batched ? Shape{g.n, g.cout, g.oh, g.ow} : Shape{g.cout, g.oh, g.ow};
  Tensor out(out_shape, input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    conv_forward_kernel<T>(g, input.data<T>().data(), weight.data<T>().data(),
                           bias ? bias->data<T>().data() : nullptr, out.data<T>().data());
  });

  std::vector<Tensor> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  record(out, "conv2d", inputs,
         [input, weight, g, has_bias](const Tensor& gout, const Tensor&) {
           std::vector<Tensor> grads(has_bias ? 3 : 2);
           dispatch(input.dtype(), [&](auto tag) {
             using T = decltype(tag);
             const T* go = gout.data<T>().data();
             if (input.requires_grad()) {
               Tensor gx(input.shape(), input.dtype());
               conv_backward_input_kernel<T>(g, go, weight.data<T>().data(), gx.data<T>().data());
               grads[0] = gx;
             }
             if (weight.requires_grad()) {
               Tensor gw(weight.shape(), weight.dtype());
               conv_backward_weight_kernel<T>(g, go, input.data<T>().data(), gw.data<T>().data());
               grads[1] = gw;
             }
             if (has_bias) {
               Tensor gb({g.cout}, input.dtype());
               auto b = gb.data<T>();
               const std::int64_t plane = g.oh * g.ow;
               for (std::int64_t co = 0; co < g.cout; ++co) {
                 double s = 0.0;
                 for (std::int64_t n = 0; n < g.n; ++n) {
                   const T* p = go + (n * g.cout + co) * plane;
#pragma omp simd reduction(+ : s)
                   for (std::int64_t i = 0; i < plane; ++i) s += p[i];
                 }
                 b[co] = static_cast<T>(s);
               }
               grads[2] = gb;
             }
           });
           return grads;
         });
  return out;
}

Tensor pixel_unshuffle(const Tensor& input, int r) {
  const ImageDims d = image_dims(input, "pixel_unshuffle");
  if (r <= 0 || d.h % r != 0 || d.w % r != 0) {
    throw TensorError("pixel_unshuffle: extents " + shape_str(input.shape()) +
                      " not divisible by " + std::to_string(r));
  }
  Tensor out(image_shape(d, d.c * r * r, d.h / r, d.w / r), input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    unshuffle_kernel<T>(input.data<T>().data(), out.data<T>().data(), d.batch, d.c, d.h, d.w, r);
  });
  record(out, "pixel_unshuffle", {input},
         [r](const Tensor& g, const Tensor&) { return std::vector<Tensor>{pixel_shuffle(g, r)}; });
  return out;
}

Tensor pixel_shuffle(const Tensor& input, int r) {
  const ImageDims d = image_dims(input, "pixel_shuffle");
  if (r <= 0 || d.c % (r * r) != 0) {
    throw TensorError("pixel_shuffle: channels " + std::to_string(d.c) + " not divisible by " +
                      std::to_string(r * r));
  }
  const std::int64_t c_out = d.c / (r * r);
  Tensor out(image_shape(d, c_out, d.h * r, d.w * r), input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    shuffle_kernel<T>(input.data<T>().data(), out.data<T>().data(), d.batch, c_out, d.h, d.w, r);
  });
  record(out, "pixel_shuffle", {input}, [r](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{pixel_unshuffle(g, r)};
  });
  return out;
}

Tensor gelu(const Tensor& input) {
  Tensor out = unary_map(input, [](double x) { return x * normal_cdf(x); });
  record(out, "gelu", {input}, [input](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{binary_map(
        input, g, [](double x, double gy) { return gy * (normal_cdf(x) + x * normal_pdf(x)); })};
  });
  return out;
}

namespace {

struct AxisSplit {
  std::int64_t outer, len, inner;
};

AxisSplit split_axis(const Shape& s, int axis, const char* op) {
  const int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw TensorError(std::string(op) + ": axis out of range for shape " + shape_str(s));
  }
  AxisSplit a{1, s[axis], 1};
  for (int i = 0; i < axis; ++i) a.outer *= s[i];
  for (int i = axis + 1; i < rank; ++i) a.inner *= s[i];
  return a;
}

}  // namespace

Tensor softmax(const Tensor& input, int axis) {
  const AxisSplit a = split_axis(input.shape(), axis, "softmax");
  Tensor out(input.shape(), input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = input.data<T>();
    auto y = out.data<T>();
    std::vector<double> buf(static_cast<std::size_t>(a.len));
    for (std::int64_t o = 0; o < a.outer; ++o) {
      for (std::int64_t in = 0; in < a.inner; ++in) {
        const std::int64_t base = o * a.len * a.inner + in;
        double mx = -INFINITY;
        for (std::int64_t i = 0; i < a.len; ++i) mx = std::max(mx, double(x[base + i * a.inner]));
        double s = 0.0;
        for (std::int64_t i = 0; i < a.len; ++i) {
          buf[i] = std::exp(double(x[base + i * a.inner]) - mx);
          s += buf[i];
        }
        for (std::int64_t i = 0; i < a.len; ++i) y[base + i * a.inner] = static_cast<T>(buf[i] / s);
      }
    }
  });
  record(out, "softmax", {input}, [a](const Tensor& g, const Tensor& out) {
    Tensor gx(out.shape(), out.dtype());
    dispatch(out.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto y = out.data<T>();
      auto gy = g.data<T>();
      auto d = gx.data<T>();
      for (std::int64_t o = 0; o < a.outer; ++o) {
        for (std::int64_t in = 0; in < a.inner; ++in) {
          const std::int64_t base = o * a.len * a.inner + in;
          double dot = 0.0;
          for (std::int64_t i = 0; i < a.len; ++i) {
            dot += double(gy[base + i * a.inner]) * double(y[base + i * a.inner]);
          }
          for (std::int64_t i = 0; i < a.len; ++i) {
            const std::int64_t k = base + i * a.inner;
            d[k] = static_cast<T>(double(y[k]) * (double(gy[k]) - dot));
          }
        }
      }
    });
    return std::vector<Tensor>{gx};
  });
  return out;
}

Tensor layernorm_channels(const Tensor& input, const Tensor& gamma,
                          const std::optional<Tensor>& beta, double eps) {
  if (!(eps > 0.0)) {
    throw TensorError("layernorm_channels: eps must be positive");
  }
  const ImageDims d = image_dims(input, "layernorm_channels");
  require_same_dtype(input, gamma, "layernorm_channels");
  if (gamma.shape() != Shape{d.c} || (beta && beta->shape() != Shape{d.c})) {
    throw TensorError("layernorm_channels: affine parameters must have shape [C]");
  }
  const std::int64_t plane = d.h * d.w;
  Tensor out(input.shape(), input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = input.data<T>();
    auto gm = gamma.data<T>();
    const T* bt = beta ? beta->data<T>().data() : nullptr;
    auto y = out.data<T>();
    for (std::int64_t n = 0; n < d.batch; ++n) {
      const std::int64_t off = n * d.c * plane;
      for (std::int64_t p = 0; p < plane; ++p) {
        double mu = 0.0;
        for (std::int64_t c = 0; c < d.c; ++c) mu += x[off + c * plane + p];
        mu /= double(d.c);
        double var = 0.0;
        for (std::int64_t c = 0; c < d.c; ++c) {
          const double t = x[off + c * plane + p] - mu;
          var += t * t;
        }
        var /= double(d.c);
        const double rstd = 1.0 / std::sqrt(var + eps);
        for (std::int64_t c = 0; c < d.c; ++c) {
          const std::int64_t k = off + c * plane + p;
          double v = (x[k] - mu) * rstd * double(gm[c]);
          if (bt) v += bt[c];
          y[k] = static_cast<T>(v);
        }
      }
    }
  });

  std::vector<Tensor> inputs{input, gamma};
  if (beta) inputs.push_back(*beta);
  const bool has_beta = beta.has_value();
  record(out, "layernorm_channels", inputs,
         [input, gamma, d, plane, eps, has_beta](const Tensor& g, const Tensor&) {
           Tensor gx(input.shape(), input.dtype());
           Tensor ggamma(gamma.shape(), gamma.dtype());
           Tensor gbeta(gamma.shape(), gamma.dtype());
           dispatch(input.dtype(), [&](auto tag) {
             using T = decltype(tag);
             auto x = input.data<T>();
             auto gy = g.data<T>();
             auto gm = gamma.data<T>();
             auto dx = gx.data<T>();
             std::vector<double> dg(d.c, 0.0), db(d.c, 0.0), xhat(d.c), gh(d.c);
             for (std::int64_t n = 0; n < d.batch; ++n) {
               const std::int64_t off = n * d.c * plane;
               for (std::int64_t p = 0; p < plane; ++p) {
                 double mu = 0.0;
                 for (std::int64_t c = 0; c < d.c; ++c) mu += x[off + c * plane + p];
                 mu /= double(d.c);
                 double var = 0.0;
                 for (std::int64_t c = 0; c < d.c; ++c) {
                   const double t = x[off + c * plane + p] - mu;
                   var += t * t;
                 }
                 var /= double(d.c);
                 const double rstd = 1.0 / std::sqrt(var + eps);
                 double mean_gh = 0.0, mean_ghx = 0.0;
                 for (std::int64_t c = 0; c < d.c; ++c) {
                   const std::int64_t k = off + c * plane + p;
                   xhat[c] = (x[k] - mu) * rstd;
                   gh[c] = double(gy[k]) * double(gm[c]);
                   dg[c] += double(gy[k]) * xhat[c];
                   db[c] += double(gy[k]);
                   mean_gh += gh[c];
                   mean_ghx += gh[c] * xhat[c];
                 }
                 mean_gh /= double(d.c);
                 mean_ghx /= double(d.c);
                 for (std::int64_t c = 0; c < d.c; ++c) {
                   dx[off + c * plane + p] =
                       static_cast<T>(rstd * (gh[c] - mean_gh - xhat[c] * mean_ghx));
                 }
               }
             }
             auto pg = ggamma.data<T>();
             auto pb = gbeta.data<T>();
             for (std::int64_t c = 0; c < d.c; ++c) {
               pg[c] = static_cast<T>(dg[c]);
               pb[c] = static_cast<T>(db[c]);
             }
           });
           std::vector<Tensor> grads{gx, ggamma};
           if (has_beta) grads.push_back(gbeta);
           return grads;
         });
  return out;
}

namespace {

struct MatmulDims {
  std::int64_t batch, m, k, n;
};

template <typename T>
void matmul_kernel(const T* a, const T* b, T* c, const MatmulDims& d) {
#pragma omp parallel for schedule(static)
  for (std::int64_t job = 0; job < d.batch * d.m; ++job) {
    const std::int64_t bi = job / d.m;
    const std::int64_t i = job % d.m;
    std::vector<double> acc(static_cast<std::size_t>(d.n), 0.0);
    const T* arow = a + (bi * d.m + i) * d.k;
    const T* bmat = b + bi * d.k * d.n;
    for (std::int64_t kk = 0; kk < d.k; ++kk) {
      const double av = arow[kk];
      const T* brow = bmat + kk * d.n;
      for (std::int64_t j = 0; j < d.n; ++j) acc[j] += av * double(brow[j]);
    }
    T* crow = c + (bi * d.m + i) * d.n;
    for (std::int64_t j = 0; j < d.n; ++j) crow[j] = static_cast<T>(acc[j]);
  }
}

}  // namespace

Tensor transpose_last(const Tensor& input) {
  const auto& s = input.shape();
  if (s.size() < 2) {
    throw TensorError("transpose_last: rank must be >= 2");
  }
  const std::int64_t rows = s[s.size() - 2], cols = s.back();
  const std::int64_t batch = input.numel() / (rows * cols);
  Shape os = s;
  std::swap(os[os.size() - 2], os.back());
  Tensor out(os, input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = input.data<T>();
    auto y = out.data<T>();
    for (std::int64_t b = 0; b < batch; ++b) {
      const std::int64_t off = b * rows * cols;
      for (std::int64_t i = 0; i < rows; ++i) {
        for (std::int64_t j = 0; j < cols; ++j) y[off + j * rows + i] = x[off + i * cols + j];
      }
    }
  });
  record(out, "transpose_last", {input}, [](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{transpose_last(g)};
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "matmul");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size()) {
    throw TensorError("matmul: incompatible ranks " + shape_str(sa) + " x " + shape_str(sb));
  }
  for (std::size_t i = 0; i + 2 < sa.size(); ++i) {
    if (sa[i] != sb[i]) {
      throw TensorError("matmul: batch extents differ " + shape_str(sa) + " x " + shape_str(sb));
    }
  }
  const std::size_t r = sa.size();
  if (sa[r - 1] != sb[r - 2]) {
    throw TensorError("matmul: inner extents differ " + shape_str(sa) + " x " + shape_str(sb));
  }
  MatmulDims d{1, sa[r - 2], sa[r - 1], sb[r - 1]};
  for (std::size_t i = 0; i + 2 < r; ++i) d.batch *= sa[i];
  Shape os = sa;
  os[r - 1] = d.n;
  Tensor out(os, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    matmul_kernel<T>(a.data<T>().data(), b.data<T>().data(), out.data<T>().data(), d);
  });
  record(out, "matmul", {a, b}, [a, b](const Tensor& g, const Tensor&) {
    NoGradGuard no_grad;
    std::vector<Tensor> grads(2);
    if (a.requires_grad()) grads[0] = matmul(g, transpose_last(b));
    if (b.requires_grad()) grads[1] = matmul(transpose_last(a), g);
    return grads;
  });
  return out;
}

Tensor reshape(const Tensor& input, const Shape& shape) {
  if (shape_numel(shape) != input.numel()) {
    throw TensorError("reshape: " + shape_str(input.shape()) + " -> " + shape_str(shape) +
                      " changes element count");
  }
  Tensor out = input.detach();
  out.impl()->shape = shape;
  const Shape original = input.shape();
  record(out, "reshape", {input}, [original](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{reshape(g, original)};
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& inputs, int axis) {
  if (inputs.empty()) {
    throw TensorError("concat: no inputs");
  }
  const Shape& s0 = inputs[0].shape();
  const AxisSplit a0 = split_axis(s0, axis, "concat");
  const int ax = axis < 0 ? axis + static_cast<int>(s0.size()) : axis;
  Shape os = s0;
  os[ax] = 0;
  std::vector<std::int64_t> lens;
  for (const auto& t : inputs) {
    require_same_dtype(inputs[0], t, "concat");
    if (t.rank() != s0.size()) throw TensorError("concat: rank mismatch");
    for (std::size_t i = 0; i < s0.size(); ++i) {
      if (static_cast<int>(i) != ax && t.shape()[i] != s0[i]) {
        throw TensorError("concat: extent mismatch " + shape_str(t.shape()) + " vs " +
                          shape_str(s0));
      }
    }
    lens.push_back(t.shape()[ax]);
    os[ax] += t.shape()[ax];
  }
  Tensor out(os, inputs[0].dtype());
  const std::int64_t total = os[ax];
  dispatch(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto y = out.data<T>();
    std::int64_t start = 0;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      auto x = inputs[t].data<T>();
      const std::int64_t chunk = lens[t] * a0.inner;
      for (std::int64_t o = 0; o < a0.outer; ++o) {
        std::copy_n(x.data() + o * chunk, chunk, y.data() + (o * total + start) * a0.inner);
      }
      start += lens[t];
    }
  });
  std::vector<Shape> shapes;
  for (const auto& t : inputs) shapes.push_back(t.shape());
  record(out, "concat", inputs, [shapes, lens, a0, total](const Tensor& g, const Tensor&) {
    std::vector<Tensor> grads;
    std::int64_t start = 0;
    for (std::size_t t = 0; t < shapes.size(); ++t) {
      Tensor gi(shapes[t], g.dtype());
      dispatch(g.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto src = g.data<T>();
        auto dst = gi.data<T>();
        const std::int64_t chunk = lens[t] * a0.inner;
        for (std::int64_t o = 0; o < a0.outer; ++o) {
          std::copy_n(src.data() + (o * total + start) * a0.inner, chunk, dst.data() + o * chunk);
        }
      });
      grads.push_back(gi);
      start += lens[t];
    }
    return grads;
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "add");
  require_same_shape(a, b, "add");
  Tensor out = binary_map(a, b, [](double x, double y) { return x + y; });
  record(out, "add", {a, b},
         [](const Tensor& g, const Tensor&) { return std::vector<Tensor>{g, g}; });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "sub");
  require_same_shape(a, b, "sub");
  Tensor out = binary_map(a, b, [](double x, double y) { return x - y; });
  record(out, "sub", {a, b}, [](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{g, unary_map(g, [](double v) { return -v; })};
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "mul");
  require_same_shape(a, b, "mul");
  Tensor out = binary_map(a, b, [](double x, double y) { return x * y; });
  record(out, "mul", {a, b}, [a, b](const Tensor& g, const Tensor&) {
    auto times = [](double x, double y) { return x * y; };
    return std::vector<Tensor>{binary_map(g, b, times), binary_map(g, a, times)};
  });
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = unary_map(a, [factor](double x) { return x * factor; });
  record(out, "scale", {a}, [factor](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{unary_map(g, [factor](double x) { return x * factor; })};
  });
  return out;
}

Tensor exp(const Tensor& a) {
  Tensor out = unary_map(a, [](double x) { return std::exp(x); });
  record(out, "exp", {a}, [](const Tensor& g, const Tensor& out) {
    return std::vector<Tensor>{binary_map(g, out, [](double x, double y) { return x * y; })};
  });
  return out;
}

Tensor mul_leading(const Tensor& a, const Tensor& s) {
  require_same_dtype(a, s, "mul_leading");
  if (a.rank() < 1 || s.shape() != Shape{a.dim(0)}) {
    throw TensorError("mul_leading: scale shape " + shape_str(s.shape()) +
                      " must equal leading extent of " + shape_str(a.shape()));
  }
  const std::int64_t lead = a.dim(0);
  const std::int64_t inner = a.numel() / lead;
  auto apply = [lead, inner](const Tensor& x, const Tensor& sc) {
    Tensor y(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto xd = x.data<T>();
      auto sd = sc.data<T>();
      auto yd = y.data<T>();
      for (std::int64_t i = 0; i < lead; ++i) {
        for (std::int64_t j = 0; j < inner; ++j) yd[i * inner + j] = xd[i * inner + j] * sd[i];
      }
    });
    return y;
  };
  Tensor out = apply(a, s);
  record(out, "mul_leading", {a, s}, [a, s, lead, inner, apply](const Tensor& g, const Tensor&) {
    std::vector<Tensor> grads(2);
    if (a.requires_grad()) grads[0] = apply(g, s);
    if (s.requires_grad()) {
      Tensor gs(s.shape(), s.dtype());
      dispatch(g.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto gd = g.data<T>();
        auto ad = a.data<T>();
        auto out = gs.data<T>();
        for (std::int64_t i = 0; i < lead; ++i) {
          double acc = 0.0;
          for (std::int64_t j = 0; j < inner; ++j) {
            acc += double(gd[i * inner + j]) * double(ad[i * inner + j]);
          }
          out[i] = static_cast<T>(acc);
        }
      });
      grads[1] = gs;
    }
    return grads;
  });
  return out;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (auto v : a.data<T>()) s += v;
  });
  Tensor out = Tensor::scalar(s, a.dtype());
  const Shape shape = a.shape();
  const DType dt = a.dtype();
  record(out, "sum", {a}, [shape, dt](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{Tensor::full(shape, g.item(), dt)};
  });
  return out;
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  double s = 0.0;
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (auto v : a.data<T>()) s += v;
  });
  Tensor out = Tensor::scalar(s / n, a.dtype());
  const Shape shape = a.shape();
  const DType dt = a.dtype();
  record(out, "mean", {a}, [shape, dt, n](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{Tensor::full(shape, g.item() / n, dt)};
  });
  return out;
}

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  require_same_dtype(pred, target, "l1_loss");
  require_same_shape(pred, target, "l1_loss");
  const double n = static_cast<double>(pred.numel());
  double s = 0.0;
  dispatch(pred.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = pred.data<T>();
    auto t = target.data<T>();
    for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(double(p[i]) - double(t[i]));
  });
  Tensor out = Tensor::scalar(s / n, pred.dtype());
  record(out, "l1_loss", {pred, target}, [pred, target, n](const Tensor& g, const Tensor&) {
    const double gy = g.item() / n;
    auto sign = [gy](double p, double t) {
      const double d = p - t;
      return d > 0.0 ? gy : (d < 0.0 ? -gy : 0.0);
    };
    Tensor gp = binary_map(pred, target, sign);
    std::vector<Tensor> grads{gp, Tensor()};
    if (target.requires_grad()) grads[1] = unary_map(gp, [](double v) { return -v; });
    return grads;
  });
  return out;
}

}  // namespace marformer::ops
