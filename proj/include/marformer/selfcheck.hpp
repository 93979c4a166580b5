#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "marformer/config.hpp"
#include "marformer/gradcheck.hpp"

namespace marformer {

/// C=8, one block and one head per level.
MARformerConfig reduced_config();

struct ModelGradCheck {
  double max_rel_error = 0.0;
  std::int64_t checked = 0;
  std::string worst_parameter;  // "name[index]"
};

/// Central differences against backward() for `samples` scalar parameters
/// drawn uniformly from the reduced model (f64, random weights, 16x16 input).
ModelGradCheck model_gradcheck(std::uint64_t seed, std::int64_t samples = 50, double h = 1e-5);

/// Per-op checks (conv, shuffles, GELU, softmax, layer norm, matmul, l1).
std::vector<GradCheckResult> op_gradchecks(std::uint64_t seed);

}  // namespace marformer
