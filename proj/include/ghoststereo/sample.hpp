#pragma once

#include <optional>

#include "ghoststereo/config.hpp"
#include "ghoststereo/tensor.hpp"

namespace gs {

// One rectified stereo pair. Images are [3, H, W] with values in [0,1];
// ground truth, when present, is [H, W] in full-resolution pixels with a
// 0/1 validity mask.
struct StereoSample {
  Array left;
  Array right;
  std::optional<Array> gt_disparity;
  std::optional<Array> valid_mask;

  i64 height() const { return left.shape[1]; }
  i64 width() const { return left.shape[2]; }
};

// Disparity values at 1/scale resolution. At scale 4 the values are in
// quarter-resolution pixel units; convex upsampling multiplies by 4 when
// producing the scale-1 map.
struct DisparityMap {
  Array values;  // [H_s, W_s]
  int scale = 1;
};

// 5-axis matching cost tensor. Immediately after group-wise correlation the
// channel count equals num_groups.
struct CostVolume {
  Array values;  // [B, C, D, H, W]
  i64 num_groups = 0;
  i64 disparity_levels = 0;
};

// Recomputes the validity mask: gt finite, 0 < gt < max_disparity, and'ed
// with any preexisting mask. Raises on mismatched shapes or non-finite
// images. Idempotent.
StereoSample validate_sample(const StereoSample& sample, const ModelConfig& config);

}  // namespace gs
