#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ghoststereo/autograd.hpp"
#include "ghoststereo/tensor.hpp"

namespace gs::test {

inline Array random_array(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Array a(s);
  for (i64 i = 0; i < a.numel(); ++i) a[i] = rng.uniform(lo, hi);
  return a;
}

inline double max_abs_diff(const Array& a, const Array& b) {
  double m = 0.0;
  for (i64 i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

// Central finite differences vs the tape gradient, on `samples` randomly
// chosen coordinates of each input. `f` must rebuild the graph from the
// given leaf tensors and return a scalar loss.
struct FdReport {
  double max_rel_err = 0.0;
  int checked = 0;
};

inline FdReport check_gradients(const std::function<Tensor(std::vector<Tensor>&)>& f,
                                std::vector<Tensor> leaves, Rng& rng, int samples_per_leaf = 5,
                                double step = 1e-3) {
  Tensor loss = f(leaves);
  backward(loss);
  FdReport rep;
  for (auto& leaf : leaves) {
    if (!leaf.requires_grad()) continue;
    Array analytic = leaf.grad();
    for (int s = 0; s < samples_per_leaf; ++s) {
      const i64 idx = rng.uniform_int(0, leaf.numel() - 1);
      const double orig = leaf.val()[idx];
      leaf.val()[idx] = orig + step;
      const double fp = f(leaves).item();
      leaf.val()[idx] = orig - step;
      const double fm = f(leaves).item();
      leaf.val()[idx] = orig;
      const double fd = (fp - fm) / (2.0 * step);
      const double an = analytic[idx];
      // denominator floored at 1e-2, so the small-gradient regime degrades
      // to an absolute comparison at 1e-5 (rtol 1e-3 * floor)
      const double rel = std::fabs(an - fd) / std::max({1e-2, std::fabs(an), std::fabs(fd)});
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace gs::test
