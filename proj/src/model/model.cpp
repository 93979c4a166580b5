#include "marformer/model.hpp"

#include <cmath>

#include "marformer/ops.hpp"
#include "marformer/rng.hpp"

namespace marformer {

namespace {

template <typename ModelT, typename Fn>
void visit_block(ModelT& b, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".norm1.weight", b.norm1);
  fn(prefix + ".drsa.q_dw.weight", b.attn.q_dw);
  fn(prefix + ".drsa.q_pw.weight", b.attn.q_pw);
  fn(prefix + ".drsa.k_dw.weight", b.attn.k_dw);
  fn(prefix + ".drsa.k_pw.weight", b.attn.k_pw);
  fn(prefix + ".drsa.v_pw.weight", b.attn.v_pw);
  fn(prefix + ".drsa.v_dw.weight", b.attn.v_dw);
  fn(prefix + ".drsa.proj.weight", b.attn.proj);
  fn(prefix + ".drsa.log_temperature", b.attn.log_temperature);
  fn(prefix + ".norm2.weight", b.norm2);
  fn(prefix + ".ffn.expand.weight", b.ffn.expand);
  fn(prefix + ".ffn.dw.weight", b.ffn.dw);
  fn(prefix + ".ffn.shrink.weight", b.ffn.shrink);
}

template <typename ModelT, typename Fn>
void visit_parameters(ModelT& m, Fn&& fn) {
  fn(std::string("in_conv.weight"), m.in_conv_weight);
  fn(std::string("in_conv.bias"), m.in_conv_bias);
  for (int k = 0; k < kNumLevels; ++k) {
    const std::string lvl = std::to_string(k + 1);
    for (std::size_t i = 0; i < m.encoder[k].size(); ++i) {
      visit_block(m.encoder[k][i], "enc" + lvl + ".block" + std::to_string(i), fn);
    }
    fn("down" + lvl + ".weight", m.down[k]);
  }
  for (std::size_t i = 0; i < m.bottleneck.size(); ++i) {
    visit_block(m.bottleneck[i], "bottleneck.block" + std::to_string(i), fn);
  }
  for (int k = kNumLevels - 1; k >= 0; --k) {
    const std::string lvl = std::to_string(k + 1);
    fn("up" + lvl + ".weight", m.up[k]);
    fn("dec" + lvl + ".reduce.weight", m.reduce[k]);
    for (std::size_t i = 0; i < m.decoder[k].size(); ++i) {
      visit_block(m.decoder[k][i], "dec" + lvl + ".block" + std::to_string(i), fn);
    }
  }
  fn(std::string("out_conv.weight"), m.out_conv_weight);
  fn(std::string("out_conv.bias"), m.out_conv_bias);
}

BlockWeights make_block(const MARformerConfig& cfg, std::int64_t c, std::int64_t heads, DType dt) {
  const std::int64_t cr = c / cfg.channel_ratio;
  const std::int64_t hidden = cfg.hidden_channels(c);
  const std::int64_t p = cfg.ffn_kernel;
  BlockWeights b;
  b.norm1 = Tensor({c}, dt);
  b.attn.q_dw = Tensor({c, 1, 3, 3}, dt);
  b.attn.q_pw = Tensor({c, c, 1, 1}, dt);
  b.attn.k_dw = Tensor({c, 1, 3, 3}, dt);
  b.attn.k_pw = Tensor({cr, c, 1, 1}, dt);
  b.attn.v_pw = Tensor({cr, c, 1, 1}, dt);
  b.attn.v_dw = Tensor({cr, 1, 3, 3}, dt);
  b.attn.proj = Tensor({c, c, 1, 1}, dt);
  b.attn.log_temperature = Tensor({heads}, dt);
  b.norm2 = Tensor({c}, dt);
  b.ffn.expand = Tensor({hidden, c, 1, 1}, dt);
  b.ffn.dw = Tensor({hidden, 1, p, p}, dt);
  b.ffn.shrink = Tensor({c, hidden, 1, 1}, dt);
  return b;
}

DrsaSettings settings_for(const MARformerConfig& cfg, int level) {
  return {cfg.heads[level], cfg.spatial_ratio, cfg.channel_ratio};
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::vector<NamedParameter> Model::parameters() const {
  std::vector<NamedParameter> out;
  visit_parameters(*this, [&](const std::string& name, const Tensor& t) { out.push_back({name, t}); });
  return out;
}

void Model::set_requires_grad(bool flag) const {
  for (auto& p : parameters()) p.tensor.set_requires_grad(flag);
}

void Model::zero_grad() const {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

Model make_model_skeleton(const MARformerConfig& config, DType dt) {
  config.validate();
  Model m;
  m.config = config;
  const std::int64_t c0 = config.level_channels(0);
  m.in_conv_weight = Tensor({c0, 1, 3, 3}, dt);
  m.in_conv_bias = Tensor({c0}, dt);
  for (int k = 0; k < kNumLevels; ++k) {
    const std::int64_t c = config.level_channels(k);
    const std::int64_t c_next = config.level_channels(k + 1);
    for (std::int64_t i = 0; i < config.blocks[k]; ++i) {
      m.encoder[k].push_back(make_block(config, c, config.heads[k], dt));
      m.decoder[k].push_back(make_block(config, c, config.heads[k], dt));
    }
    m.down[k] = Tensor({c_next, 4 * c, 1, 1}, dt);
    m.up[k] = Tensor({4 * c, c_next, 1, 1}, dt);
    m.reduce[k] = Tensor({c, 2 * c, 1, 1}, dt);
  }
  const std::int64_t cb = config.level_channels(kNumLevels);
  for (std::int64_t i = 0; i < config.blocks[kNumLevels]; ++i) {
    m.bottleneck.push_back(make_block(config, cb, config.heads[kNumLevels], dt));
  }
  m.out_conv_weight = Tensor({1, c0, 3, 3}, dt);
  m.out_conv_bias = Tensor({1}, dt);
  return m;
}

Model build_model(const MARformerConfig& config, std::uint64_t seed, DType dt) {
  Model m = make_model_skeleton(config, dt);
  Rng rng(seed);
  visit_parameters(m, [&](const std::string& name, Tensor& t) {
    if (name.rfind("out_conv.", 0) == 0 || ends_with(name, "log_temperature")) {
      t.fill(0.0);
    } else if (ends_with(name, "norm1.weight") || ends_with(name, "norm2.weight")) {
      t.fill(1.0);
    } else if (name == "in_conv.bias") {
      const double bound = 1.0 / std::sqrt(9.0);
      for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(-bound, bound));
    } else {
      const auto& s = t.shape();
      const double bound = 1.0 / std::sqrt(static_cast<double>(s[1] * s[2] * s[3]));
      for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(-bound, bound));
    }
  });
  return m;
}

std::int64_t count_params(const Model& model) {
  std::int64_t n = 0;
  for (const auto& p : model.parameters()) n += p.tensor.numel();
  return n;
}

Tensor drsa_forward(const Tensor& x, const DrsaWeights& w, const DrsaSettings& s, DrsaTrace* trace) {
  if (x.rank() != 3) {
    throw TensorError("drsa_forward: expected [C,H,W], got " + shape_str(x.shape()));
  }
  const std::int64_t c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  if (s.heads <= 0 || s.channel_ratio <= 0 || s.spatial_ratio <= 0 || c % s.heads != 0 ||
      c % (s.channel_ratio * s.heads) != 0) {
    throw TensorError("drsa_forward: channels " + std::to_string(c) +
                      " must be divisible by heads*channel_ratio");
  }
  const std::int64_t cr = c / s.channel_ratio;
  const int stride = static_cast<int>(s.spatial_ratio);
  const int groups_c = static_cast<int>(c);

  Tensor q = ops::conv2d(ops::conv2d(x, w.q_dw, std::nullopt, {stride, 1, groups_c}), w.q_pw,
                         std::nullopt);
  Tensor k = ops::conv2d(ops::conv2d(x, w.k_dw, std::nullopt, {stride, 1, groups_c}), w.k_pw,
                         std::nullopt);
  Tensor v = ops::conv2d(ops::conv2d(x, w.v_pw, std::nullopt), w.v_dw, std::nullopt,
                         {1, 1, static_cast<int>(cr)});
  if (k.dim(0) != cr || v.dim(0) != cr) {
    throw TensorError("drsa_forward: key/value projections must map C -> C/channel_ratio");
  }
  const std::int64_t n_red = q.dim(1) * q.dim(2);
  const std::int64_t n_full = h * wd;
  const std::int64_t d = c / s.heads, dr = cr / s.heads;

  Tensor qh = ops::reshape(q, {s.heads, d, n_red});
  Tensor kh = ops::reshape(k, {s.heads, dr, n_red});
  Tensor vh = ops::reshape(v, {s.heads, dr, n_full});
  Tensor sim = ops::matmul(qh, ops::transpose_last(kh));
  Tensor inv_alpha =
      ops::scale(ops::exp(ops::scale(w.log_temperature, -1.0)), 1.0 / std::sqrt(double(n_red)));
  Tensor attn = ops::softmax(ops::mul_leading(sim, inv_alpha), -1);
  Tensor out = ops::reshape(ops::matmul(attn, vh), {c, h, wd});
  if (trace) {
    trace->q_shape = {c, n_red};
    trace->k_shape = {cr, n_red};
    trace->v_shape = {cr, n_full};
    trace->attention = attn.detach();
  }
  return ops::conv2d(out, w.proj, std::nullopt);
}

Tensor p2ffn_core(const Tensor& x, const FfnWeights& w) {
  const std::int64_t hidden = w.expand.dim(0);
  const int pad = static_cast<int>(w.dw.dim(2) / 2);
  Tensor h = ops::gelu(ops::conv2d(x, w.expand, std::nullopt));
  h = ops::gelu(ops::conv2d(h, w.dw, std::nullopt, {1, pad, static_cast<int>(hidden)}));
  return ops::conv2d(h, w.shrink, std::nullopt);
}

Tensor p2ffn_forward(const Tensor& x, const FfnWeights& w) { return ops::add(x, p2ffn_core(x, w)); }

Tensor block_forward(const Tensor& x, const BlockWeights& w, const DrsaSettings& s) {
  Tensor x1 = ops::add(x, drsa_forward(ops::layernorm_channels(x, w.norm1, std::nullopt), w.attn, s));
  return ops::add(x1, p2ffn_core(ops::layernorm_channels(x1, w.norm2, std::nullopt), w.ffn));
}

Tensor downsample(const Tensor& x, const Tensor& weight) {
  return ops::conv2d(ops::pixel_unshuffle(x, 2), weight, std::nullopt);
}

Tensor upsample(const Tensor& x, const Tensor& weight) {
  return ops::pixel_shuffle(ops::conv2d(x, weight, std::nullopt), 2);
}

Tensor model_residual(const Model& m, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw TensorError("model_forward: expected [1,H,W] input, got " + shape_str(image.shape()));
  }
  if (image.dim(1) % 8 != 0 || image.dim(2) % 8 != 0) {
    throw TensorError("model_forward: H and W must be divisible by 8, got " +
                      shape_str(image.shape()));
  }
  if (image.dtype() != m.dtype()) {
    throw TensorError("model_forward: input dtype differs from model dtype");
  }
  const auto& cfg = m.config;
  Tensor x = ops::conv2d(image, m.in_conv_weight, m.in_conv_bias, {1, 1, 1});
  std::array<Tensor, kNumLevels> skips;
  for (int k = 0; k < kNumLevels; ++k) {
    for (const auto& b : m.encoder[k]) x = block_forward(x, b, settings_for(cfg, k));
    skips[k] = x;
    x = downsample(x, m.down[k]);
  }
  for (const auto& b : m.bottleneck) x = block_forward(x, b, settings_for(cfg, kNumLevels));
  for (int k = kNumLevels - 1; k >= 0; --k) {
    x = upsample(x, m.up[k]);
    x = ops::conv2d(ops::concat({x, skips[k]}, 0), m.reduce[k], std::nullopt);
    for (const auto& b : m.decoder[k]) x = block_forward(x, b, settings_for(cfg, k));
  }
  return ops::conv2d(x, m.out_conv_weight, m.out_conv_bias, {1, 1, 1});
}

Tensor model_forward(const Model& m, const Tensor& image) {
  return ops::add(image, model_residual(m, image));
}

}  // namespace marformer
