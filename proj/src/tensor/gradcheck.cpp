#include "marformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "marformer/autograd.hpp"
#include "marformer/rng.hpp"

namespace marformer {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult check_gradients(const std::string& name,
                                const std::function<Tensor(const std::vector<Tensor>&)>& loss_fn,
                                std::vector<Tensor> inputs, double h,
                                std::int64_t max_elements_per_input, std::uint64_t seed) {
  for (auto& t : inputs) {
    if (t.dtype() != DType::f64) {
      throw TensorError("check_gradients: inputs must be f64");
    }
    t.zero_grad();
    t.set_requires_grad(true);
  }
  Tensor loss = loss_fn(inputs);
  backward(loss);

  GradCheckResult result{name, 0.0, 0};
  Rng rng(seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& x = inputs[k];
    std::vector<std::int64_t> idx(static_cast<std::size_t>(x.numel()));
    std::iota(idx.begin(), idx.end(), 0);
    if (max_elements_per_input >= 0 && static_cast<std::int64_t>(idx.size()) > max_elements_per_input) {
      for (std::size_t i = 0; i < static_cast<std::size_t>(max_elements_per_input); ++i) {
        const auto j = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(idx.size()) - 1));
        std::swap(idx[i], idx[j]);
      }
      idx.resize(static_cast<std::size_t>(max_elements_per_input));
    }
    const Tensor analytic = x.grad().defined() ? x.grad() : Tensor::zeros(x.shape());
    NoGradGuard no_grad;
    for (auto i : idx) {
      const double orig = x.get(i);
      x.set(i, orig + h);
      const double fp = loss_fn(inputs).item();
      x.set(i, orig - h);
      const double fm = loss_fn(inputs).item();
      x.set(i, orig);
      const double numeric = (fp - fm) / (2.0 * h);
      result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic.get(i), numeric));
      ++result.checked;
    }
  }
  return result;
}

}  // namespace marformer
