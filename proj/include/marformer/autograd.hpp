#pragma once

#include <functional>
#include <string>
#include <vector>

#include "marformer/tensor.hpp"

namespace marformer {

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Reverse-mode pass from a scalar loss. Leaf tensors with requires_grad get
/// their gradients accumulated into `grad()`. The graph behind `loss` is
/// released afterwards; a second call on the same loss throws.
void backward(const Tensor& loss);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element of
/// `x`. `x` is perturbed in place and restored; `f` runs with recording off.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, Tensor& x, double h);

namespace detail {

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out, const Tensor& out)>;

/// Attaches a backward rule to `out` when any input participates in autograd.
void record(Tensor& out, std::string name, std::vector<Tensor> inputs, BackwardFn fn);

bool needs_grad(const std::vector<Tensor>& inputs);

}  // namespace detail

}  // namespace marformer
