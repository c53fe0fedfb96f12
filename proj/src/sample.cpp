#include "ghoststereo/sample.hpp"

#include <cmath>

#include "ghoststereo/errors.hpp"

namespace gs {

StereoSample validate_sample(const StereoSample& sample, const ModelConfig& config) {
  if (!same_shape(sample.left.shape, sample.right.shape))
    throw ShapeMismatchError("validate_sample: left " + shape_str(sample.left.shape) +
                             " vs right " + shape_str(sample.right.shape));
  if (sample.left.shape.size() != 3 || sample.left.shape[0] != 3)
    throw ShapeMismatchError("validate_sample: images must be [3,H,W]");
  if (!sample.left.all_finite() || !sample.right.all_finite())
    throw NonFiniteImageError("validate_sample: image contains NaN or Inf");

  StereoSample out = sample;
  if (sample.gt_disparity) {
    const Array& gt = *sample.gt_disparity;
    if (gt.shape != Shape{sample.left.shape[1], sample.left.shape[2]})
      throw ShapeMismatchError("validate_sample: gt shape " + shape_str(gt.shape) +
                               " does not match image " + shape_str(sample.left.shape));
    Array mask(gt.shape);
    const double dmax = static_cast<double>(config.max_disparity);
    for (i64 i = 0; i < gt.numel(); ++i) {
      const double d = gt[i];
      bool ok = std::isfinite(d) && d > 0.0 && d < dmax;
      // preexisting exclusions (occlusion, sensor dropout) are kept
      if (ok && sample.valid_mask) ok = (*sample.valid_mask)[i] != 0.0;
      mask[i] = ok ? 1.0 : 0.0;
    }
    out.valid_mask = std::move(mask);
  } else {
    out.valid_mask.reset();
  }
  return out;
}

}  // namespace gs
