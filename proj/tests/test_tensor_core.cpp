#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "marformer/autograd.hpp"
#include "marformer/gradcheck.hpp"
#include "marformer/mtsr.hpp"
#include "marformer/ops.hpp"
#include "marformer/rng.hpp"

using namespace marformer;
namespace o = marformer::ops;

namespace {

// Six-nested-loop direct convolution, kept deliberately naive.
std::vector<double> direct_conv(const Tensor& x, const Tensor& w, const Tensor* b, int stride,
                                int pad, int groups, std::int64_t& oh, std::int64_t& ow) {
  const auto cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const auto cout = w.dim(0), k = w.dim(2);
  oh = (h + 2 * pad - k) / stride + 1;
  ow = (wd + 2 * pad - k) / stride + 1;
  const auto cin_g = cin / groups, cout_g = cout / groups;
  std::vector<double> out(cout * oh * ow, 0.0);
  for (std::int64_t co = 0; co < cout; ++co)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xx = 0; xx < ow; ++xx) {
        long double s = b ? b->get(co) : 0.0;
        for (std::int64_t c = 0; c < cin_g; ++c)
          for (std::int64_t ky = 0; ky < k; ++ky)
            for (std::int64_t kx = 0; kx < k; ++kx) {
              const auto iy = y * stride - pad + ky, ix = xx * stride - pad + kx;
              if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
              const auto ci = (co / cout_g) * cin_g + c;
              s += static_cast<long double>(w.get(((co * cin_g + c) * k + ky) * k + kx)) *
                   x.get((ci * h + iy) * wd + ix);
            }
        out[(co * oh + y) * ow + xx] = static_cast<double>(s);
      }
  return out;
}

// erf by its Maclaurin series in long double; independent of std::erf.
long double series_erf(long double z) {
  long double sum = 0.0L, term = z;
  for (int n = 0; n < 200; ++n) {
    sum += term / (2 * n + 1);
    term *= -z * z / (n + 1);
  }
  return sum * 2.0L / std::sqrt(3.14159265358979323846264338327950288L);
}

}  // namespace

TEST_CASE("conv2d identity kernel and zero-input bias") {
  Tensor x = Tensor::full({1, 3, 3}, 1.0);
  Tensor w = Tensor::from_vector({1, 1, 1, 1}, {1.0});
  CHECK(bit_equal(o::conv2d(x, w, std::nullopt), x));

  Tensor z = Tensor::zeros({2, 4, 4});
  Rng rng(3);
  Tensor w3 = rng.uniform_tensor({3, 2, 3, 3}, -1, 1);
  Tensor b = Tensor::from_vector({3}, {0.5, -1.25, 2.0});
  Tensor y = o::conv2d(z, w3, b, {.stride = 1, .padding = 1});
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < 16; ++i) CHECK(y.get(c * 16 + i) == b.get(c));
}

TEST_CASE("conv2d matches direct evaluation") {
  Rng rng(11);
  SUBCASE("stride 2, padding 1") {
    Tensor x = rng.uniform_tensor({1, 4, 4}, -1, 1);
    Tensor w = rng.uniform_tensor({2, 1, 3, 3}, -1, 1);
    Tensor y = o::conv2d(x, w, std::nullopt, {.stride = 2, .padding = 1});
    std::int64_t oh, ow;
    auto ref = direct_conv(x, w, nullptr, 2, 1, 1, oh, ow);
    REQUIRE(y.shape() == Shape{2, 2, 2});
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.get(i) == doctest::Approx(ref[i]).epsilon(1e-12));
  }
  SUBCASE("random shapes up to 4x8x16x16, f32 and grouped") {
    for (int trial = 0; trial < 12; ++trial) {
      const int groups = (trial % 3 == 0) ? 4 : (trial % 3 == 1 ? 1 : 2);
      const std::int64_t cin = 4, cout = 8;
      const std::int64_t k = (trial % 2) ? 3 : 1 + 2 * (trial % 4 == 0 ? 2 : 0);
      const int stride = 1 + trial % 2;
      const int pad = static_cast<int>(k / 2);
      const std::int64_t hw = 8 + 2 * (trial % 5);
      const DType dt = trial % 2 ? DType::f32 : DType::f64;
      Tensor x = rng.uniform_tensor({cin, hw, hw}, -1, 1, dt);
      Tensor w = rng.uniform_tensor({cout, cin / groups, k, k}, -1, 1, dt);
      Tensor b = rng.uniform_tensor({cout}, -1, 1, dt);
      Tensor y = o::conv2d(x, w, b, {.stride = stride, .padding = pad, .groups = groups});
      std::int64_t oh, ow;
      auto ref = direct_conv(x, w, &b, stride, pad, groups, oh, ow);
      REQUIRE(y.shape() == Shape{cout, oh, ow});
      for (std::int64_t i = 0; i < y.numel(); ++i) {
        CHECK(relative_error(y.get(i), ref[i], 1e-6) < 1e-5);
      }
    }
  }
  SUBCASE("batched input equals per-sample evaluation") {
    Tensor xb = rng.uniform_tensor({4, 8, 16, 16}, -1, 1);
    Tensor w = rng.uniform_tensor({8, 1, 3, 3}, -1, 1);
    Tensor y = o::conv2d(xb, w, std::nullopt, {.stride = 1, .padding = 1, .groups = 8});
    const auto all = xb.to_vector();
    for (std::int64_t n = 0; n < 4; ++n) {
      Tensor xn = Tensor::from_vector(
          {8, 16, 16}, std::vector<double>(all.begin() + n * 2048, all.begin() + (n + 1) * 2048));
      std::int64_t oh, ow;
      auto ref = direct_conv(xn, w, nullptr, 1, 1, 8, oh, ow);
      for (std::int64_t i = 0; i < 2048; ++i) {
        CHECK(relative_error(y.get(n * 2048 + i), ref[i], 1e-6) < 1e-5);
      }
    }
  }
}

TEST_CASE("conv2d rejects bad shapes") {
  Tensor x = Tensor::zeros({3, 4, 4});
  CHECK_THROWS_AS(o::conv2d(x, Tensor::zeros({2, 2, 3, 3}), std::nullopt), TensorError);
  CHECK_THROWS_AS(o::conv2d(x, Tensor::zeros({2, 1, 3, 3}), std::nullopt, {.groups = 2}),
                  TensorError);
  CHECK_THROWS_AS(o::conv2d(x, Tensor::zeros({3, 3, 2, 2}), std::nullopt), TensorError);
}

TEST_CASE("pixel shuffle / unshuffle") {
  Tensor x = Tensor::from_vector({1, 2, 2}, {1, 2, 3, 4});
  Tensor u = o::pixel_unshuffle(x, 2);
  REQUIRE(u.shape() == Shape{4, 1, 1});
  CHECK(u.to_vector() == std::vector<double>{1, 2, 3, 4});

  Tensor s = o::pixel_shuffle(Tensor::from_vector({4, 1, 1}, {5, 6, 7, 8}), 2);
  REQUIRE(s.shape() == Shape{1, 2, 2});
  CHECK(s.to_vector() == std::vector<double>{5, 6, 7, 8});

  CHECK(o::pixel_shuffle(Tensor::zeros({8, 4, 4}), 2).shape() == Shape{2, 8, 8});
  CHECK_THROWS_AS(o::pixel_unshuffle(Tensor::zeros({1, 3, 4}), 2), TensorError);
  CHECK_THROWS_AS(o::pixel_shuffle(Tensor::zeros({6, 2, 2}), 2), TensorError);

  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const int r = 1 + static_cast<int>(rng.uniform_int(1, 3));
    const auto c = rng.uniform_int(1, 4);
    const auto h = r * rng.uniform_int(1, 4), w = r * rng.uniform_int(1, 4);
    const DType dt = trial % 2 ? DType::f32 : DType::f64;
    Tensor v = rng.uniform_tensor({c, h, w}, -5, 5, dt);
    Tensor un = o::pixel_unshuffle(v, r);
    CHECK(bit_equal(o::pixel_shuffle(un, r), v));
    auto a = v.to_vector(), b = un.to_vector();
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
  }
}

TEST_CASE("gelu") {
  CHECK(o::gelu(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(o::gelu(Tensor::scalar(10.0)).item() == doctest::Approx(10.0).epsilon(1e-6));
  const long double phi1 = 0.5L * (1.0L + series_erf(1.0L / std::sqrt(2.0L)));
  CHECK(std::abs(o::gelu(Tensor::scalar(1.0)).item() - static_cast<double>(phi1)) < 1e-14);
  const long double phim = 0.5L * (1.0L + series_erf(-1.5L / std::sqrt(2.0L)));
  CHECK(std::abs(o::gelu(Tensor::scalar(-1.5)).item() - static_cast<double>(-1.5L * phim)) < 1e-14);
}

TEST_CASE("softmax") {
  Tensor u = o::softmax(Tensor::full({3}, 2.5), 0);
  for (int i = 0; i < 3; ++i) CHECK(u.get(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  Tensor big = o::softmax(Tensor::from_vector({2}, {1000.0, 0.0}), 0);
  CHECK(big.all_finite());
  CHECK(big.get(0) == doctest::Approx(1.0));
  CHECK(big.get(1) < 1e-300);

  Rng rng(17);
  Tensor v = rng.uniform_tensor({4}, -3, 3);
  Tensor sv = o::softmax(v, 0);
  long double denom = 0.0L;
  for (int i = 0; i < 4; ++i) denom += std::exp(static_cast<long double>(v.get(i)));
  for (int i = 0; i < 4; ++i) {
    const long double ref = std::exp(static_cast<long double>(v.get(i))) / denom;
    CHECK(std::abs(sv.get(i) - static_cast<double>(ref)) < 1e-15);
  }

  for (int axis = 0; axis < 3; ++axis) {
    Tensor x = rng.uniform_tensor({3, 4, 5}, -20, 20);
    Tensor y = o::softmax(x, axis);
    Tensor shifted = x.clone();
    for (std::int64_t i = 0; i < shifted.numel(); ++i) shifted.set(i, shifted.get(i) + 123.0);
    // Adding a constant everywhere shifts every slice along every axis.
    CHECK(max_abs_diff(o::softmax(shifted, axis), y) < 1e-6);
    const auto& s = x.shape();
    const std::int64_t inner = axis == 2 ? 1 : (axis == 1 ? 5 : 20);
    const std::int64_t outer = x.numel() / (s[axis] * inner);
    for (std::int64_t ob = 0; ob < outer; ++ob)
      for (std::int64_t in = 0; in < inner; ++in) {
        double total = 0.0;
        for (std::int64_t i = 0; i < s[axis]; ++i) {
          const double p = y.get((ob * s[axis] + i) * inner + in);
          CHECK(p > 0.0);
          CHECK(p < 1.0);
          total += p;
        }
        CHECK(std::abs(total - 1.0) < 1e-6);
      }
  }
}

TEST_CASE("layernorm_channels") {
  Tensor gamma = Tensor::full({3}, 1.0);
  Tensor c = o::layernorm_channels(Tensor::full({3, 2, 2}, 7.0), gamma, Tensor::zeros({3}));
  for (std::int64_t i = 0; i < c.numel(); ++i) CHECK(c.get(i) == 0.0);

  Rng rng(23);
  Tensor x = rng.uniform_tensor({3, 2, 2}, -4, 4);
  Tensor g = rng.uniform_tensor({3}, 0.5, 1.5);
  Tensor b = rng.uniform_tensor({3}, -1, 1);
  Tensor y = o::layernorm_channels(x, g, b, 1e-6);
  for (int p = 0; p < 4; ++p) {
    double mu = 0;
    for (int ch = 0; ch < 3; ++ch) mu += x.get(ch * 4 + p);
    mu /= 3;
    double var = 0;
    for (int ch = 0; ch < 3; ++ch) var += (x.get(ch * 4 + p) - mu) * (x.get(ch * 4 + p) - mu);
    var /= 3;
    for (int ch = 0; ch < 3; ++ch) {
      const double ref = (x.get(ch * 4 + p) - mu) / std::sqrt(var + 1e-6) * g.get(ch) + b.get(ch);
      CHECK(y.get(ch * 4 + p) == doctest::Approx(ref).epsilon(1e-12));
    }
  }

  Tensor xr = rng.uniform_tensor({16, 5, 5}, -10, 10);
  Tensor yr = o::layernorm_channels(xr, Tensor::full({16}, 1.0), std::nullopt);
  for (int p = 0; p < 25; ++p) {
    double mu = 0, sq = 0;
    for (int ch = 0; ch < 16; ++ch) mu += yr.get(ch * 25 + p);
    mu /= 16;
    for (int ch = 0; ch < 16; ++ch) sq += (yr.get(ch * 25 + p) - mu) * (yr.get(ch * 25 + p) - mu);
    CHECK(std::abs(mu) < 1e-12);
    CHECK(sq / 16 == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("matmul") {
  Tensor a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_vector({2, 2}, {5, 6, 7, 8});
  CHECK(o::matmul(a, b).to_vector() == std::vector<double>{19, 22, 43, 50});

  Rng rng(29);
  Tensor x = rng.uniform_tensor({3, 5}, -1, 1);
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.set(i * 4, 1.0);
  CHECK(bit_equal(o::matmul(eye, x), x));

  Tensor p = rng.uniform_tensor({2, 3, 4}, -1, 1);
  Tensor q = rng.uniform_tensor({2, 4, 5}, -1, 1);
  Tensor lhs = o::transpose_last(o::matmul(p, q));
  Tensor rhs = o::matmul(o::transpose_last(q), o::transpose_last(p));
  CHECK(max_abs_diff(lhs, rhs) < 1e-14);

  CHECK_THROWS_AS(o::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), TensorError);
  CHECK_THROWS_AS(o::matmul(Tensor::zeros({2, 2, 3}), Tensor::zeros({3, 3, 1})), TensorError);
}

TEST_CASE("backward basics") {
  Tensor w = Tensor::from_vector({3}, {0.5, -1.0, 2.0});
  w.set_requires_grad(true);
  Tensor x = Tensor::from_vector({3}, {4.0, 5.0, 6.0});
  backward(o::sum(o::mul(w, x)));
  CHECK(w.grad().to_vector() == x.to_vector());

  Tensor v = Tensor::from_vector({2}, {1.0, 2.0});
  v.set_requires_grad(true);
  Tensor loss = o::sum(o::mul(v, v));
  backward(loss);
  CHECK(v.grad().to_vector() == std::vector<double>{2.0, 4.0});
  CHECK_THROWS_AS(backward(loss), TensorError);

  Tensor nonscalar = o::mul(v, v);
  CHECK_THROWS_AS(backward(nonscalar), TensorError);

  // fan-out: loss = sum(v) + sum(v) accumulates twice; prior grad also accumulates.
  v.zero_grad();
  backward(o::add(o::sum(v), o::sum(v)));
  CHECK(v.grad().to_vector() == std::vector<double>{2.0, 2.0});
}

TEST_CASE("finite_diff_grad") {
  auto sumsq = [](const Tensor& t) {
    double s = 0;
    for (std::int64_t i = 0; i < t.numel(); ++i) s += t.get(i) * t.get(i);
    return s;
  };
  Tensor x = Tensor::from_vector({1}, {3.0});
  CHECK(finite_diff_grad(sumsq, x, 1e-5).item() == doctest::Approx(6.0).epsilon(1e-9));
  CHECK(x.item() == 3.0);

  auto linear = [](const Tensor& t) { return 2.0 * t.get(0) - 0.5 * t.get(1); };
  Tensor y = Tensor::from_vector({2}, {1.0, 1.0});
  for (double h : {1.0, 1e-3}) {
    Tensor g = finite_diff_grad(linear, y, h);
    CHECK(std::abs(g.get(0) - 2.0) < 1e-12);
    CHECK(std::abs(g.get(1) + 0.5) < 1e-12);
  }
}

TEST_CASE("backward matches finite differences on a two-layer toy net") {
  Rng rng(31);
  Tensor x = rng.uniform_tensor({2, 6, 6}, -1, 1);
  Tensor w1 = rng.uniform_tensor({4, 2, 3, 3}, -0.5, 0.5);
  Tensor b1 = rng.uniform_tensor({4}, -0.1, 0.1);
  Tensor w2 = rng.uniform_tensor({1, 4, 1, 1}, -0.5, 0.5);
  w1.set_requires_grad(true);
  b1.set_requires_grad(true);
  w2.set_requires_grad(true);
  auto net = [&]() {
    Tensor h = o::gelu(o::conv2d(x, w1, b1, {.stride = 1, .padding = 1}));
    return o::mean(o::mul(o::conv2d(h, w2, std::nullopt), o::conv2d(h, w2, std::nullopt)));
  };
  backward(net());
  for (Tensor* p : {&w1, &b1, &w2}) {
    Tensor fd = finite_diff_grad([&](const Tensor&) { return net().item(); }, *p, 1e-4);
    for (std::int64_t i = 0; i < p->numel(); ++i) {
      CHECK(relative_error(p->grad().get(i), fd.get(i)) < 1e-4);
    }
  }
}

TEST_CASE("every operator passes a gradient check") {
  Rng rng(37);
  auto weights = [&](const Shape& s) { return rng.uniform_tensor(s, -1, 1); };
  // Random projection turns any output into a scalar with a nontrivial gradient.
  auto project = [](const Tensor& y, const Tensor& r) { return o::sum(o::mul(y, r)); };

  struct Case {
    std::string name;
    std::function<Tensor(const std::vector<Tensor>&)> fn;
    std::vector<Tensor> inputs;
  };
  Tensor r_conv = weights({3, 3, 3});
  Tensor r_img = weights({2, 4, 4});
  Tensor r_un = weights({8, 2, 2});
  Tensor r_sh = weights({1, 4, 4});
  Tensor r_mm = weights({2, 3, 5});
  Tensor r_cat = weights({5, 4, 4});
  Tensor r_lead = weights({3, 4});
  Tensor target = weights({2, 4, 4});
  std::vector<Case> cases{
      {"conv2d", [&](auto& in) { return project(o::conv2d(in[0], in[1], in[2], {.stride = 2, .padding = 1}), r_conv); },
       {weights({2, 6, 6}), weights({3, 2, 3, 3}), weights({3})}},
      {"conv2d_depthwise", [&](auto& in) { return project(o::conv2d(in[0], in[1], std::nullopt, {.stride = 1, .padding = 1, .groups = 2}), r_img); },
       {weights({2, 4, 4}), weights({2, 1, 3, 3})}},
      {"pixel_unshuffle", [&](auto& in) { return project(o::pixel_unshuffle(in[0], 2), r_un); }, {weights({2, 4, 4})}},
      {"pixel_shuffle", [&](auto& in) { return project(o::pixel_shuffle(in[0], 2), r_sh); }, {weights({4, 2, 2})}},
      {"gelu", [&](auto& in) { return project(o::gelu(in[0]), r_img); }, {weights({2, 4, 4})}},
      {"softmax", [&](auto& in) { return project(o::softmax(in[0], -1), r_img); }, {weights({2, 4, 4})}},
      {"layernorm", [&](auto& in) { return project(o::layernorm_channels(in[0], in[1], in[2]), r_img); },
       {weights({2, 4, 4}), weights({2}), weights({2})}},
      {"matmul", [&](auto& in) { return project(o::matmul(in[0], in[1]), r_mm); }, {weights({2, 3, 4}), weights({2, 4, 5})}},
      {"transpose_reshape", [&](auto& in) { return project(o::reshape(o::transpose_last(in[0]), {2, 3, 5}), r_mm); }, {weights({2, 5, 3})}},
      {"concat", [&](auto& in) { return project(o::concat({in[0], in[1]}, 0), r_cat); }, {weights({2, 4, 4}), weights({3, 4, 4})}},
      {"add_sub_mul_scale", [&](auto& in) { return project(o::scale(o::mul(o::add(in[0], in[1]), o::sub(in[0], in[1])), 0.7), r_img); },
       {weights({2, 4, 4}), weights({2, 4, 4})}},
      {"exp_mul_leading", [&](auto& in) { return project(o::mul_leading(in[0], o::exp(in[1])), r_lead); }, {weights({3, 4}), weights({3})}},
      {"mean", [&](auto& in) { return o::mean(o::mul(in[0], in[0])); }, {weights({2, 4, 4})}},
      {"l1_loss", [&](auto& in) { return o::l1_loss(in[0], target); }, {weights({2, 4, 4})}},
  };
  for (auto& c : cases) {
    GradCheckResult res = check_gradients(c.name, c.fn, c.inputs, 1e-5);
    INFO(c.name);
    CHECK(res.checked > 0);
    CHECK(res.max_rel_error < 1e-4);
  }
}

TEST_CASE("l1 gradient is sign(pred - target) / N with sign(0) = 0") {
  Tensor p = Tensor::from_vector({4}, {1.0, -2.0, 3.0, 0.5});
  Tensor t = Tensor::from_vector({4}, {0.0, 0.0, 3.0, 1.0});
  p.set_requires_grad(true);
  Tensor loss = o::l1_loss(p, t);
  CHECK(loss.item() == doctest::Approx((1.0 + 2.0 + 0.0 + 0.5) / 4));
  backward(loss);
  CHECK(p.grad().to_vector() == std::vector<double>{0.25, -0.25, 0.0, -0.25});
}

TEST_CASE("operators are deterministic") {
  Rng rng(41);
  Tensor x = rng.uniform_tensor({4, 16, 16}, -1, 1, DType::f32);
  Tensor w = rng.uniform_tensor({8, 4, 3, 3}, -1, 1, DType::f32);
  Tensor a = o::softmax(o::gelu(o::conv2d(x, w, std::nullopt, {.stride = 1, .padding = 1})), 0);
  Tensor b = o::softmax(o::gelu(o::conv2d(x, w, std::nullopt, {.stride = 1, .padding = 1})), 0);
  CHECK(bit_equal(a, b));
}

TEST_CASE("MTSR1 encoding") {
  Tensor t = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6}, DType::f32);
  std::stringstream ss;
  mtsr::write(ss, t);
  const std::string bytes = ss.str();
  REQUIRE(bytes.size() == mtsr::encoded_size(t));
  CHECK(bytes.substr(0, 4) == "MTSR");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 2);
  CHECK(static_cast<unsigned char>(bytes[7]) == 2);  // LE u32 extent 2
  CHECK(bytes[8] == 0);
  // 1.0f = 0x3F800000 little endian
  CHECK(static_cast<unsigned char>(bytes[15]) == 0x00);
  CHECK(static_cast<unsigned char>(bytes[18]) == 0x3F);

  Rng rng(43);
  for (DType dt : {DType::f32, DType::f64}) {
    Tensor r = rng.uniform_tensor({3, 1, 4, 2}, -1e3, 1e3, dt);
    std::stringstream s2;
    mtsr::write(s2, r);
    CHECK(bit_equal(mtsr::read(s2), r));
  }

  std::stringstream bad("MTSX\x01\x00\x01\x01\x00\x00\x00");
  CHECK_THROWS_AS(mtsr::read(bad), TensorError);
  std::string v2 = bytes;
  v2[4] = 2;
  std::stringstream badv(v2);
  CHECK_THROWS_AS(mtsr::read(badv), TensorError);
  std::stringstream trunc(bytes.substr(0, bytes.size() - 1));
  CHECK_THROWS_AS(mtsr::read(trunc), TensorError);
}
