#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "marformer/config.hpp"
#include "marformer/model.hpp"

namespace marformer {

// Costs are multiply-accumulates (1 MAC = 1 FLOP unit). Convs count
// C_in/groups * C_out * k^2 * H_out * W_out, matmuls M*K*N, and norm, GELU and
// softmax one unit per element. Residual adds are free.

class ComplexityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModuleCost {
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

struct CostReport {
  std::int64_t params = 0;
  std::int64_t flops = 0;
  // in_conv, enc1..3, down1..3, bottleneck, up3..1, dec3..1, out_conv
  std::vector<std::pair<std::string, ModuleCost>> breakdown;

  double gflops() const { return static_cast<double>(flops) * 1e-9; }
  double mparams() const { return static_cast<double>(params) * 1e-6; }
};

/// Running tally used by estimate_flops; exposed so small nets can be costed.
class CostAccumulator {
 public:
  void conv(std::int64_t c_in, std::int64_t c_out, std::int64_t k, std::int64_t groups,
            std::int64_t h_out, std::int64_t w_out, bool bias = false);
  void matmul(std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n);
  void elementwise(std::int64_t count);
  void params(std::int64_t count) { cost_.params += count; }
  const ModuleCost& total() const { return cost_; }

 private:
  ModuleCost cost_;
};

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, std::int64_t stride,
                                    std::int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

CostReport estimate_flops(const MARformerConfig& config, std::int64_t height, std::int64_t width);

/// Analytic parameter count of the model `config` would build.
std::int64_t analytic_params(const MARformerConfig& config);

struct AttentionCost {
  std::int64_t channel_cost;
  std::int64_t spatial_cost;
};

/// Channel-wise similarity (C*C'*H'W' + C*C'*HW) against the spatial
/// comparator C*(HW)^2.
AttentionCost attention_cost_comparison(std::int64_t c, std::int64_t c_reduced, std::int64_t h,
                                        std::int64_t w, std::int64_t h_reduced,
                                        std::int64_t w_reduced);

/// One row of a published ablation table. Values without a published column
/// (the MA reference row) are left empty.
struct AblationRow {
  std::string label;
  std::optional<MARformerConfig> config;
  std::optional<double> published_mparams;
  std::optional<double> published_gflops;
};

/// "table1", "table2", "table3a" or "table3b".
std::vector<AblationRow> ablation_rows(const std::string& table);

}  // namespace marformer
