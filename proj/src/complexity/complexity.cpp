#include "marformer/complexity.hpp"

namespace marformer {

void CostAccumulator::conv(std::int64_t c_in, std::int64_t c_out, std::int64_t k,
                           std::int64_t groups, std::int64_t h_out, std::int64_t w_out, bool bias) {
  const std::int64_t w = c_in / groups * c_out * k * k;
  cost_.params += w + (bias ? c_out : 0);
  cost_.flops += w * h_out * w_out;
}

void CostAccumulator::matmul(std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n) {
  cost_.flops += batch * m * k * n;
}

void CostAccumulator::elementwise(std::int64_t count) { cost_.flops += count; }

namespace {

void block_cost(CostAccumulator& acc, const MARformerConfig& cfg, std::int64_t c,
                std::int64_t heads, std::int64_t h, std::int64_t w) {
  const std::int64_t n = h * w;
  const std::int64_t cr = c / cfg.channel_ratio;
  const std::int64_t hq = conv_out_extent(h, 3, cfg.spatial_ratio, 1);
  const std::int64_t wq = conv_out_extent(w, 3, cfg.spatial_ratio, 1);
  const std::int64_t d = c / heads, dr = cr / heads;

  acc.params(c);
  acc.elementwise(c * n);
  acc.conv(c, c, 3, c, hq, wq);
  acc.conv(c, c, 1, 1, hq, wq);
  acc.conv(c, c, 3, c, hq, wq);
  acc.conv(c, cr, 1, 1, hq, wq);
  acc.conv(c, cr, 1, 1, h, w);
  acc.conv(cr, cr, 3, cr, h, w);
  acc.params(heads);
  acc.matmul(heads, d, hq * wq, dr);
  acc.elementwise(heads * d * dr);
  acc.matmul(heads, d, dr, n);
  acc.conv(c, c, 1, 1, h, w);

  const std::int64_t g = cfg.hidden_channels(c);
  const std::int64_t p = cfg.ffn_kernel;
  acc.params(c);
  acc.elementwise(c * n);
  acc.conv(c, g, 1, 1, h, w);
  acc.elementwise(g * n);
  acc.conv(g, g, p, g, h, w);
  acc.elementwise(g * n);
  acc.conv(g, c, 1, 1, h, w);
}

}  // namespace

CostReport estimate_flops(const MARformerConfig& cfg, std::int64_t height, std::int64_t width) {
  cfg.validate();
  if (height <= 0 || width <= 0 || height % 8 != 0 || width % 8 != 0) {
    throw ComplexityError("estimate_flops: H and W must be positive multiples of 8");
  }
  CostReport report;
  auto add = [&](const std::string& name, const CostAccumulator& acc) {
    report.breakdown.emplace_back(name, acc.total());
    report.params += acc.total().params;
    report.flops += acc.total().flops;
  };
  auto res_h = [&](int k) { return height >> k; };
  auto res_w = [&](int k) { return width >> k; };

  {
    CostAccumulator acc;
    acc.conv(1, cfg.level_channels(0), 3, 1, height, width, true);
    add("in_conv", acc);
  }
  for (int k = 0; k < kNumLevels; ++k) {
    const std::int64_t c = cfg.level_channels(k);
    CostAccumulator enc;
    for (std::int64_t i = 0; i < cfg.blocks[k]; ++i) block_cost(enc, cfg, c, cfg.heads[k], res_h(k), res_w(k));
    add("enc" + std::to_string(k + 1), enc);
    CostAccumulator down;
    down.conv(4 * c, cfg.level_channels(k + 1), 1, 1, res_h(k + 1), res_w(k + 1));
    add("down" + std::to_string(k + 1), down);
  }
  {
    CostAccumulator acc;
    for (std::int64_t i = 0; i < cfg.blocks[kNumLevels]; ++i) {
      block_cost(acc, cfg, cfg.level_channels(kNumLevels), cfg.heads[kNumLevels],
                 res_h(kNumLevels), res_w(kNumLevels));
    }
    add("bottleneck", acc);
  }
  for (int k = kNumLevels - 1; k >= 0; --k) {
    const std::int64_t c = cfg.level_channels(k);
    CostAccumulator up;
    up.conv(cfg.level_channels(k + 1), 4 * c, 1, 1, res_h(k + 1), res_w(k + 1));
    add("up" + std::to_string(k + 1), up);
    CostAccumulator dec;
    dec.conv(2 * c, c, 1, 1, res_h(k), res_w(k));
    for (std::int64_t i = 0; i < cfg.blocks[k]; ++i) block_cost(dec, cfg, c, cfg.heads[k], res_h(k), res_w(k));
    add("dec" + std::to_string(k + 1), dec);
  }
  {
    CostAccumulator acc;
    acc.conv(cfg.level_channels(0), 1, 3, 1, height, width, true);
    add("out_conv", acc);
  }
  return report;
}

std::int64_t analytic_params(const MARformerConfig& config) {
  return estimate_flops(config, 8, 8).params;
}

AttentionCost attention_cost_comparison(std::int64_t c, std::int64_t c_reduced, std::int64_t h,
                                        std::int64_t w, std::int64_t h_reduced,
                                        std::int64_t w_reduced) {
  if (c <= 0 || c_reduced <= 0 || h <= 0 || w <= 0 || h_reduced <= 0 || w_reduced <= 0) {
    throw ComplexityError("attention_cost_comparison: extents must be positive");
  }
  const std::int64_t n = h * w;
  return {c * c_reduced * h_reduced * w_reduced + c * c_reduced * n, c * n * n};
}

std::vector<AblationRow> ablation_rows(const std::string& table) {
  std::vector<AblationRow> rows;
  const MARformerConfig large = preset("L");
  if (table == "table1") {
    rows.push_back({"MARformer-L", preset("L"), 11.76, 60.25});
    rows.push_back({"MARformer-B", preset("B"), 6.88, 46.20});
    rows.push_back({"MARformer-T", preset("T"), 0.40, 12.82});
  } else if (table == "table2") {
    struct V {
      const char* label;
      std::int64_t rs, rc;
      double mp, gf;
    };
    const V variants[] = {{"baseline", 1, 1, 13.30, 82.00},  {"S2", 2, 1, 13.30, 67.17},
                          {"C2", 1, 2, 11.76, 71.06},        {"S2C2", 2, 2, 11.76, 60.25},
                          {"S4C4", 4, 4, 10.99, 54.60},      {"S8C8", 8, 8, 10.61, 52.63},
                          {"S16C16", 16, 16, 10.42, 51.80}};
    rows.push_back({"MA", std::nullopt, std::nullopt, std::nullopt});
    for (const auto& v : variants) {
      MARformerConfig c = large;
      c.spatial_ratio = v.rs;
      c.channel_ratio = v.rc;
      rows.push_back({v.label, c, v.mp, v.gf});
    }
  } else if (table == "table3a") {
    const double mp[] = {11.46, 11.52, 11.76, 12.09};
    const double gf[] = {55.95, 57.67, 60.25, 63.69};
    for (int i = 0; i < 4; ++i) {
      MARformerConfig c = large;
      c.ffn_kernel = 3 + 2 * i;
      rows.push_back({"p=" + std::to_string(c.ffn_kernel), c, mp[i], gf[i]});
    }
  } else if (table == "table3b") {
    const double mp[] = {8.48, 11.76, 15.04, 18.32};
    const double gf[] = {41.39, 60.25, 79.10, 97.96};
    for (int i = 0; i < 4; ++i) {
      MARformerConfig c = large;
      c.expansion = i + 1;
      rows.push_back({"gamma=" + std::to_string(i + 1), c, mp[i], gf[i]});
    }
  } else {
    throw ComplexityError("unknown ablation table '" + table +
                          "' (expected table1, table2, table3a or table3b)");
  }
  return rows;
}

}  // namespace marformer
