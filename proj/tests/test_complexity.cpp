#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "marformer/complexity.hpp"
#include "marformer/model.hpp"
#include "marformer/rng.hpp"

using namespace marformer;

namespace {

std::int64_t softmax_elements(const MARformerConfig& c) {
  std::int64_t total = 0;
  for (int k = 0; k < 4; ++k) {
    const std::int64_t ch = c.level_channels(k);
    const std::int64_t per = (ch / c.heads[k]) * (ch / c.channel_ratio / c.heads[k]) * c.heads[k];
    total += per * c.blocks[k] * (k < 3 ? 2 : 1);
  }
  return total;
}

MARformerConfig random_config(Rng& rng) {
  MARformerConfig c;
  c.base_channels = 16 * rng.uniform_int(1, 3);
  c.channel_ratio = std::int64_t{1} << rng.uniform_int(0, 2);
  c.spatial_ratio = std::int64_t{1} << rng.uniform_int(0, 2);
  c.ffn_kernel = 2 * rng.uniform_int(0, 3) + 1;
  c.expansion = static_cast<double>(rng.uniform_int(1, 3));
  c.fixed_width = rng.uniform() < 0.3;
  for (int k = 0; k < 4; ++k) {
    c.blocks[k] = rng.uniform_int(0, 2);
    c.heads[k] = std::int64_t{1} << rng.uniform_int(0, 1);
  }
  return c;
}

}  // namespace

TEST_CASE("attention cost comparison") {
  const auto r = attention_cost_comparison(48, 24, 64, 64, 32, 32);
  CHECK(r.channel_cost == 5898240);
  CHECK(r.spatial_cost == 805306368);
  for (std::int64_t c : {16, 32, 48, 64, 96}) {
    for (std::int64_t hw = 32; hw <= 256; hw += 16) {
      const auto s = attention_cost_comparison(c, c / 2, hw, hw, hw / 2, hw / 2);
      CHECK(s.channel_cost < s.spatial_cost);
    }
  }
  const auto full = attention_cost_comparison(12, 12, 10, 7, 10, 7);
  CHECK(full.channel_cost == 2 * 12 * 12 * 70);
  CHECK_THROWS_AS(attention_cost_comparison(0, 1, 1, 1, 1, 1), ComplexityError);
}

TEST_CASE("closed-form conv costs") {
  CostAccumulator a;
  a.conv(1, 48, 3, 1, 400, 400);
  CHECK(a.total().flops == 69120000);
  CHECK(a.total().params == 432);
  CostAccumulator b;
  b.conv(48, 96, 1, 1, 10, 10);
  CHECK(b.total().params == 4608);
  // toy net: 3x3 1->8 (bias), depth-wise 5x5 on 8, 1x1 8->4 at 20x20
  CostAccumulator t;
  t.conv(1, 8, 3, 1, 20, 20, true);
  t.conv(8, 8, 5, 8, 20, 20);
  t.conv(8, 4, 1, 1, 20, 20);
  CHECK(t.total().flops == (72 + 200 + 32) * 400);
  CHECK(t.total().params == 80 + 200 + 32);
}

TEST_CASE("analytic params match the built model and its checkpoint") {
  for (const char* name : {"L", "B", "T"}) {
    CHECK(analytic_params(preset(name)) == count_params(make_model_skeleton(preset(name))));
  }
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const auto c = random_config(rng);
    CHECK(analytic_params(c) == count_params(make_model_skeleton(c)));
  }
  MARformerConfig tiny;
  tiny.base_channels = 8;
  tiny.blocks = {1, 1, 1, 1};
  tiny.heads = {1, 1, 1, 1};
  const auto path = std::filesystem::temp_directory_path() / "marformer_complexity.mtck";
  save_checkpoint(build_model(tiny, 1), path);
  std::int64_t from_manifest = 0;
  for (const auto& e : read_checkpoint_manifest(path)) {
    std::int64_t n = 1;
    for (auto d : e.shape) n *= d;
    from_manifest += n;
  }
  std::filesystem::remove(path);
  CHECK(from_manifest == analytic_params(tiny));
}

TEST_CASE("breakdown sums to totals and flops scale by four") {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    auto c = random_config(rng);
    const auto r = estimate_flops(c, 64, 48);
    std::int64_t p = 0, f = 0;
    for (const auto& [name, m] : r.breakdown) {
      p += m.params;
      f += m.flops;
    }
    CHECK(p == r.params);
    CHECK(f == r.flops);
    CHECK(r.breakdown.size() == 15);
    c.spatial_ratio = 1;
    // With no spatial reduction every term scales with HW except the
    // softmax over the d x d' similarity.
    const auto small = estimate_flops(c, 32, 40);
    const auto big = estimate_flops(c, 64, 80);
    CHECK(big.flops - 4 * small.flops == -3 * softmax_elements(c));
  }
  CHECK_THROWS_AS(estimate_flops(preset("L"), 60, 64), ComplexityError);
}

TEST_CASE("reduction ratio FLOPs and parameter structure") {
  const auto rows = ablation_rows("table2");
  REQUIRE(rows.size() == 8);
  CHECK_FALSE(rows[0].config.has_value());
  const auto base = estimate_flops(*rows[1].config, 400, 400);
  CHECK(std::abs(base.gflops() / 82.0 - 1.0) < 0.2);
  std::int64_t prev_params = base.params;
  std::int64_t prev_flops = base.flops;
  for (std::size_t i = 2; i < rows.size(); ++i) {
    const auto r = estimate_flops(*rows[i].config, 400, 400);
    const double delta = 100.0 * (double(r.flops) / double(base.flops) - 1.0);
    const double published = 100.0 * (*rows[i].published_gflops / 82.0 - 1.0);
    CHECK(std::abs(delta - published) <= 5.0);
    CHECK(std::abs(r.gflops() / *rows[i].published_gflops - 1.0) <= 0.2);
    if (rows[i].label == "S2") {
      CHECK(r.params == base.params);
    } else {
      CHECK(r.params < base.params);
    }
    if (i >= 5) {
      CHECK(r.params <= prev_params);
      CHECK(r.flops < prev_flops);
    }
    prev_params = r.params;
    prev_flops = r.flops;
  }
}

TEST_CASE("kernel size and expansion trends") {
  const auto a = ablation_rows("table3a");
  std::vector<std::int64_t> p;
  for (const auto& row : a) p.push_back(analytic_params(*row.config));
  for (std::size_t i = 1; i < p.size(); ++i) CHECK(p[i] > p[i - 1]);
  CHECK(std::abs((p[3] - p[2]) / 0.33e6 - 1.0) <= 0.2);
  for (const auto& row : ablation_rows("table3b")) {
    CHECK(std::abs(analytic_params(*row.config) / (*row.published_mparams * 1e6) - 1.0) <= 0.15);
  }
  for (const auto& row : ablation_rows("table1")) {
    const auto r = estimate_flops(*row.config, 400, 400);
    CHECK(std::abs(r.gflops() / *row.published_gflops - 1.0) <= 0.2);
  }
  CHECK_THROWS_AS(ablation_rows("table9"), ComplexityError);
}
