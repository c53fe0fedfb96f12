#pragma once

#include <vector>

#include "ghoststereo/autograd.hpp"

namespace gs {

// ---- elementwise / broadcast ----
// Binary ops follow NumPy broadcasting; gradients reduce over the
// broadcast axes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor hard_sigmoid(const Tensor& x);  // clamp(x/6 + 0.5, 0, 1)
Tensor smooth_l1(const Tensor& x);     // elementwise: 0.5x^2 for |x|<1 else |x|-0.5

// ---- shape ----
Tensor reshape(const Tensor& x, Shape s);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor narrow(const Tensor& x, int axis, i64 start, i64 len);

// ---- reductions ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// ---- linear algebra ----
// x: [B, Cin], w: [Cout, Cin], b: [Cout] (optional, pass undefined Tensor)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---- convolutions ----
// x: [B, C, *spatial] with 2 or 3 spatial dims, w: [Cout, Cin/groups, *k].
// Zero padding, no dilation. Depthwise = groups == Cin.
struct ConvOpts {
  std::vector<i64> stride;
  std::vector<i64> padding;
  i64 groups = 1;
};
Tensor conv_nd(const Tensor& x, const Tensor& w, const Tensor& bias, const ConvOpts& opts);

// Transposed conv, w: [Cin, Cout, *k]; out = (in-1)*stride - 2*padding + k.
Tensor conv_transpose_nd(const Tensor& x, const Tensor& w, const Tensor& bias,
                         const std::vector<i64>& stride, const std::vector<i64>& padding);

// ---- normalization / pooling ----
// Per-channel batch norm over (B, *spatial). Training mode normalizes with
// batch statistics and updates running stats in place (they live outside
// the graph); eval mode uses the running stats.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Array& running_mean,
                  Array& running_var, bool training, double momentum = 0.1, double eps = 1e-5);

Tensor global_avg_pool(const Tensor& x);  // [B, C, *S] -> [B, C]

Tensor softmax(const Tensor& x, int axis);

// ---- stereo-specific ----
// L2-normalizes every per-pixel group vector: v / (||v|| + eps).
Tensor group_l2_normalize(const Tensor& x, i64 groups, double eps = 1e-6);

// Group-wise correlation volume: out[b,g,d,y,x] =
//   (G/C) * <left group g at (y,x), right group g at (y,x-d)>, zero for x<d.
Tensor gwc_volume(const Tensor& left, const Tensor& right, i64 groups, i64 disparity_levels);

// Expected disparity over the k best-scoring candidates per pixel.
// volume: [B, D, H, W] of scores -> [B, H, W]. Ties prefer the lower index.
Tensor topk_expectation(const Tensor& volume, i64 k);

// disp: [B, h, w] quarter-res units; weights: [B, 9, 4, 4, h, w] convex over
// the 9-axis. Output: [B, 4h, 4w] in full-res units (values scaled by 4).
// Out-of-frame neighbors replicate the edge.
Tensor convex_upsample(const Tensor& disp, const Tensor& weights);

}  // namespace gs
