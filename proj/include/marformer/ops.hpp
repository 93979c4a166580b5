#pragma once

#include <optional>
#include <vector>

#include "marformer/tensor.hpp"

namespace marformer::ops {

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// 2-D cross-correlation. `input` is [C_in,H,W] or [N,C_in,H,W]; `weight` is
/// [C_out, C_in/groups, k, k] with k odd. Sums are accumulated in double.
Tensor conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias,
              Conv2dOptions opts = {});

/// [C,H,W] -> [C*r*r, H/r, W/r]; output channel = c*r*r + dy*r + dx.
Tensor pixel_unshuffle(const Tensor& input, int r);
/// Exact inverse of pixel_unshuffle.
Tensor pixel_shuffle(const Tensor& input, int r);

/// x * Phi(x), erf form.
Tensor gelu(const Tensor& input);
Tensor softmax(const Tensor& input, int axis);

/// Normalizes the channel vector at every pixel of a [C,H,W] tensor.
Tensor layernorm_channels(const Tensor& input, const Tensor& gamma,
                          const std::optional<Tensor>& beta, double eps = 1e-6);

/// [..., M, K] x [..., K, N]; leading extents must match exactly.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two axes.
Tensor transpose_last(const Tensor& input);

Tensor reshape(const Tensor& input, const Shape& shape);
/// Concatenates along `axis`; all other extents must agree.
Tensor concat(const std::vector<Tensor>& inputs, int axis);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor exp(const Tensor& a);
/// Multiplies slice i of the leading axis of `a` by s[i]; s has shape [a.dim(0)].
Tensor mul_leading(const Tensor& a, const Tensor& s);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// mean(|pred - target|), subgradient sign(0) = 0.
Tensor l1_loss(const Tensor& pred, const Tensor& target);

}  // namespace marformer::ops
