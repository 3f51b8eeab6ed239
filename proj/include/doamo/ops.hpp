#ifndef DOAMO_OPS_HPP_
#define DOAMO_OPS_HPP_

#include <array>
#include <vector>

#include "doamo/autograd.hpp"

namespace doamo {

// Differentiable ops over batched (N, C, H, W) maps unless noted.
namespace ops {

// Stride-1 convolution with zero padding. weight is (Cout, Cin, k, k); bias
// (Cout) may be null.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int pad);

// Batch normalisation over (N, H, W) per channel. In training mode the batch
// statistics normalise the input and the running buffers are updated with
// `momentum`; otherwise the running buffers are used as-is.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum = 0.1,
               double eps = 1e-5);

Var relu(const Var& x);
Var sigmoid(const Var& x);

// 2x2 max pooling, stride 2; odd trailing rows/columns are dropped.
Var maxpool2(const Var& x);

Var concat_channels(const std::vector<Var>& xs);

// Equal-weight channel mean -> (N, 1, H, W).
Var channel_mean(const Var& x);

// Cross-correlation of a single-channel map with a fixed 3x3 kernel using
// reflect padding (index -1 maps to 1, H maps to H-2).
Var fixed_conv3x3_reflect(const Var& x, const std::array<double, 9>& kernel);

// sqrt(a^2 + b^2). The backward pass divides by sqrt(a^2 + b^2 + eps) so the
// gradient at a zero magnitude is zero instead of NaN.
Var magnitude(const Var& a, const Var& b, double eps = 1e-12);

// Non-overlapping k x k tile mean broadcast back over each tile; border
// tiles are clipped and averaged over their actual extent.
Var region_aggregate(const Var& x, int k);

// Spatial mean -> (N, C, 1, 1).
Var global_mean(const Var& x);

// Softmax across the channel axis of an (N, K, 1, 1) tensor.
Var softmax_channels(const Var& x);

// out[n] = sum_k weights[n, k] * candidates[k][n]; weights is (N, K, 1, 1).
Var weighted_sum(const std::vector<Var>& candidates, const Var& weights);

// out[n, c, i, j] = map[n, 0, i, j] * x[n, c, i, j].
Var scale_by_map(const Var& map, const Var& x);

Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise, equal shapes
Var mul_scalar(const Var& x, double s);
Var sum(const Var& x);  // -> shape (1)

// (N, A*R, h, w) head output -> (N, h*w*A, R) rows ordered (y, x, anchor).
Var flatten_head(const Var& x, int anchors_per_cell, int row_width);

// Concatenate rank-3 (N, T_i, R) tensors along axis 1.
Var concat_rows(const std::vector<Var>& xs);

}  // namespace ops
}  // namespace doamo

#endif  // DOAMO_OPS_HPP_
