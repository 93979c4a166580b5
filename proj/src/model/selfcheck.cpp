#include "marformer/selfcheck.hpp"

#include <algorithm>
#include <unordered_set>

#include "marformer/autograd.hpp"
#include "marformer/model.hpp"
#include "marformer/ops.hpp"
#include "marformer/rng.hpp"

namespace marformer {

namespace o = ops;

MARformerConfig reduced_config() {
  MARformerConfig c;
  c.base_channels = 8;
  c.blocks = {1, 1, 1, 1};
  c.heads = {1, 1, 1, 1};
  return c;
}

ModelGradCheck model_gradcheck(std::uint64_t seed, std::int64_t samples, double h) {
  const Model m = build_model(reduced_config(), seed, DType::f64);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  // random weights everywhere, including the zero-initialised output conv
  const auto params = m.parameters();
  for (const auto& p : params) {
    Tensor t = p.tensor;
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(-0.4, 0.4));
  }
  const Tensor x = rng.uniform_tensor({1, 16, 16}, -1, 1);
  const Tensor r = rng.uniform_tensor({1, 16, 16}, -1, 1);
  auto loss = [&] { return o::sum(o::mul(model_residual(m, x), r)); };

  m.zero_grad();
  m.set_requires_grad(true);
  backward(loss());

  std::vector<std::int64_t> offsets{0};
  for (const auto& p : params) offsets.push_back(offsets.back() + p.tensor.numel());
  const std::int64_t total = offsets.back();
  samples = std::min(samples, total);

  std::unordered_set<std::int64_t> picked;
  ModelGradCheck out;
  NoGradGuard no_grad;
  while (static_cast<std::int64_t>(picked.size()) < samples) {
    const std::int64_t flat = rng.uniform_int(0, total - 1);
    if (!picked.insert(flat).second) continue;
    const auto k = static_cast<std::size_t>(
        std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin() - 1);
    const std::int64_t i = flat - offsets[k];
    Tensor t = params[k].tensor;
    const double analytic = t.grad().defined() ? t.grad().get(i) : 0.0;
    const double orig = t.get(i);
    t.set(i, orig + h);
    const double fp = loss().item();
    t.set(i, orig - h);
    const double fm = loss().item();
    t.set(i, orig);
    const double err = relative_error(analytic, (fp - fm) / (2.0 * h));
    if (err >= out.max_rel_error) {
      out.max_rel_error = err;
      out.worst_parameter = params[k].name + "[" + std::to_string(i) + "]";
    }
    ++out.checked;
  }
  m.set_requires_grad(false);
  return out;
}

std::vector<GradCheckResult> op_gradchecks(std::uint64_t seed) {
  Rng rng(seed);
  auto rand = [&](const Shape& s) { return rng.uniform_tensor(s, -1, 1); };
  std::vector<GradCheckResult> out;
  const Tensor proj8 = rand({2, 8, 8});

  const Tensor proj_conv = rand({4, 4, 4});
  out.push_back(check_gradients(
      "conv2d 3x3 stride 2 grouped",
      [&](const std::vector<Tensor>& in) {
        return o::sum(o::mul(o::conv2d(in[0], in[1], in[2], {2, 1, 2}), proj_conv));
      },
      {rand({4, 8, 8}), rand({4, 2, 3, 3}), rand({4})}));
  const Tensor proj_pw = rand({3, 8, 8});
  out.push_back(check_gradients(
      "conv2d 1x1",
      [&](const std::vector<Tensor>& in) {
        return o::sum(o::mul(o::conv2d(in[0], in[1], std::nullopt), proj_pw));
      },
      {rand({2, 8, 8}), rand({3, 2, 1, 1})}));
  const Tensor proj_sh = rand({8, 4, 4});
  out.push_back(check_gradients(
      "pixel shuffles",
      [&](const std::vector<Tensor>& in) {
        return o::sum(o::mul(o::pixel_unshuffle(o::pixel_shuffle(in[0], 2), 2), proj_sh));
      },
      {rand({8, 4, 4})}));
  out.push_back(check_gradients(
      "gelu", [&](const std::vector<Tensor>& in) { return o::sum(o::mul(o::gelu(in[0]), proj8)); },
      {rand({2, 8, 8})}));
  out.push_back(check_gradients(
      "softmax",
      [&](const std::vector<Tensor>& in) { return o::sum(o::mul(o::softmax(in[0], 2), proj8)); },
      {rand({2, 8, 8})}));
  const Tensor proj_ln = rand({5, 4, 4});
  out.push_back(check_gradients(
      "layernorm",
      [&](const std::vector<Tensor>& in) {
        return o::sum(o::mul(o::layernorm_channels(in[0], in[1], std::nullopt), proj_ln));
      },
      {rand({5, 4, 4}), rand({5})}));
  const Tensor proj_mm = rand({2, 3, 5});
  out.push_back(check_gradients(
      "matmul",
      [&](const std::vector<Tensor>& in) {
        return o::sum(o::mul(o::matmul(in[0], o::transpose_last(in[1])), proj_mm));
      },
      {rand({2, 3, 4}), rand({2, 5, 4})}));
  // target offset keeps every residual away from the kink at zero
  const Tensor target = rng.uniform_tensor({2, 8, 8}, 3, 4);
  out.push_back(check_gradients(
      "l1 loss", [&](const std::vector<Tensor>& in) { return o::l1_loss(in[0], target); },
      {rand({2, 8, 8})}));
  return out;
}

}  // namespace marformer
