#pragma once

#include <vector>

#include "polyseg/nn/autograd.hpp"

namespace polyseg::nn {

/// Elementwise y = x if x > 0 else slope*x. Throws DomainError for slope < 0.
Var leaky_relu(const Var& x, double slope);

Var sigmoid(const Var& x);

/// y = scale*x + shift, elementwise.
Var affine(const Var& x, double scale, double shift);

/// Same-shape elementwise sum / product.
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);

/// x: N x C x H x W scaled per pixel by gate: N x 1 x H x W (broadcast over channels).
Var scale_channels(const Var& x, const Var& gate);

/// Concatenate along the channel axis; inputs share N, H, W.
Var concat_channels(const std::vector<Var>& xs);

/// 2-d convolution, stride 1, square kernel, zero padding.
/// x: N x Ci x H x W, w: Co x Ci x k x k, b: Co.
Var conv2d(const Var& x, const Var& w, const Var& b, int pad, int dilation = 1);

/// 2x2 max pooling, stride 2. H and W must be even.
Var max_pool2(const Var& x);

/// 3x3 max pooling, stride 1, same padding (window clipped at borders).
Var max_pool3_same(const Var& x);

/// Nearest-neighbor 2x upsampling.
Var upsample_nearest2(const Var& x);

/// Bilinear resize to (out_h, out_w), half-pixel centers, edges clamped.
Var resize_bilinear(const Var& x, int out_h, int out_w);

/// Group normalization with per-channel affine parameters gamma, beta (shape C).
/// C must be divisible by groups. Statistics are per (sample, group), so the
/// result is independent of the batch composition.
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);

/// Scalar sum of all entries; result has shape {1}.
Var sum_all(const Var& x);

/// Mean over pixels of -[t*log s(z) + (1-t)*log(1-s(z))], log-sum-exp stable form.
Var bce_with_logits_mean(const Var& logits, const Tensor& truth);

/// 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps), p = sigmoid(logits),
/// summed over the whole batch.
Var dice_loss(const Var& logits, const Tensor& truth, double eps = 1.0);

} // namespace polyseg::nn
