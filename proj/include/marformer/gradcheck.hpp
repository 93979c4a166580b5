#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "marformer/tensor.hpp"

namespace marformer {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::int64_t checked = 0;
};

/// |a - b| / max(|a|, |b|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-8);

/// Compares backward() against central differences for a scalar-valued
/// function of several f64 inputs. Every element of every input is checked
/// unless `max_elements_per_input` limits it (then a seeded sample is used).
GradCheckResult check_gradients(const std::string& name,
                                const std::function<Tensor(const std::vector<Tensor>&)>& loss_fn,
                                std::vector<Tensor> inputs, double h = 1e-5,
                                std::int64_t max_elements_per_input = -1,
                                std::uint64_t seed = 0);

}  // namespace marformer
