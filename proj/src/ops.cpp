#include "ghoststereo/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ghoststereo/errors.hpp"

namespace gs {

namespace {

// Broadcast machinery (NumPy rules, aligned from trailing dims).
Shape broadcast_shape(const Shape& a, const Shape& b) {
  const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  Shape out(r);
  for (int i = 0; i < r; ++i) {
    i64 da = i < r - ra ? 1 : a[i - (r - ra)];
    i64 db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1) {
      throw ShapeMismatchError("broadcast: incompatible shapes " + shape_str(a) + " vs " +
                               shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `s` expanded to the broadcast output rank; broadcast dims get 0.
Shape broadcast_strides(const Shape& s, const Shape& out) {
  const int r = static_cast<int>(out.size());
  const int rs = static_cast<int>(s.size());
  Shape st(r, 0);
  i64 acc = 1;
  for (int i = rs - 1; i >= 0; --i) {
    st[i + (r - rs)] = (s[i] == 1 && out[i + (r - rs)] != 1) ? 0 : acc;
    acc *= s[i];
  }
  return st;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& stra, const Shape& strb, F&& f) {
  const int r = static_cast<int>(out.size());
  const i64 n = shape_numel(out);
  if (r == 0) {
    if (n == 1) f(0, 0, 0);
    return;
  }
  std::vector<i64> idx(r, 0);
  i64 ai = 0, bi = 0;
  for (i64 oi = 0; oi < n; ++oi) {
    f(oi, ai, bi);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      ai += stra[d];
      bi += strb[d];
      if (idx[d] < out[d]) break;
      ai -= stra[d] * out[d];
      bi -= strb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// Sums `g` (shaped like `out`) into an array shaped like `target`.
Array reduce_to(const Array& g, const Shape& target) {
  Array r = Array::zeros(target);
  Shape st = broadcast_strides(target, g.shape);
  Shape unit(g.shape.size(), 0);
  for_each_broadcast(g.shape, st, unit, [&](i64 oi, i64 ti, i64) { r[ti] += g[oi]; });
  return r;
}

template <typename FwdF, typename BwdF>
Tensor binary_broadcast_op(const Tensor& a, const Tensor& b, FwdF fwd, BwdF bwd_pair) {
  Shape os = broadcast_shape(a.shape(), b.shape());
  Shape sa = broadcast_strides(a.shape(), os);
  Shape sb = broadcast_strides(b.shape(), os);
  Array out(os);
  const Array& av = a.val();
  const Array& bv = b.val();
  for_each_broadcast(os, sa, sb,
                     [&](i64 oi, i64 ai, i64 bi) { out[oi] = fwd(av[ai], bv[bi]); });
  return make_op(std::move(out), {a, b}, [a, b, os, sa, sb, bwd_pair](Node& self) {
    const Array& g = self.grad;
    const Array& av = a.val();
    const Array& bv = b.val();
    if (a.requires_grad()) {
      Array ga = Array::zeros(a.shape());
      for_each_broadcast(os, sa, sb, [&](i64 oi, i64 ai, i64 bi) {
        ga[ai] += g[oi] * bwd_pair(av[ai], bv[bi], true);
      });
      a.node()->accumulate_grad(ga);
    }
    if (b.requires_grad()) {
      Array gb = Array::zeros(b.shape());
      for_each_broadcast(os, sa, sb, [&](i64 oi, i64 ai, i64 bi) {
        gb[bi] += g[oi] * bwd_pair(av[ai], bv[bi], false);
      });
      b.node()->accumulate_grad(gb);
    }
  });
}

template <typename FwdF, typename DerF>
Tensor unary_op(const Tensor& x, FwdF fwd, DerF der) {
  Array out(x.shape());
  const Array& xv = x.val();
  const i64 n = out.numel();
  for (i64 i = 0; i < n; ++i) out[i] = fwd(xv[i]);
  return make_op(std::move(out), {x}, [x, der](Node& self) {
    if (!x.requires_grad()) return;
    Array gx = Array::zeros(x.shape());
    const Array& xv = x.val();
    const i64 n = gx.numel();
    for (i64 i = 0; i < n; ++i) gx[i] = self.grad[i] * der(xv[i]);
    x.node()->accumulate_grad(gx);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_broadcast_op(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, bool) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_broadcast_op(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, bool first) { return first ? 1.0 : -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_broadcast_op(
      a, b, [](double x, double y) { return x * y; },
      [](double x, double y, bool first) { return first ? y : x; });
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(a, [c](double x) { return c * x; }, [c](double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary_op(x, [](double v) { return v > 0.0 ? v : 0.0; },
                  [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                  [](double v) {
                    double s = 1.0 / (1.0 + std::exp(-v));
                    return s * (1.0 - s);
                  });
}

Tensor hard_sigmoid(const Tensor& x) {
  return unary_op(x,
                  [](double v) { return std::min(std::max(v / 6.0 + 0.5, 0.0), 1.0); },
                  [](double v) { return (v > -3.0 && v < 3.0) ? 1.0 / 6.0 : 0.0; });
}

Tensor smooth_l1(const Tensor& x) {
  return unary_op(x,
                  [](double v) { return std::fabs(v) < 1.0 ? 0.5 * v * v : std::fabs(v) - 0.5; },
                  [](double v) { return std::fabs(v) < 1.0 ? v : (v > 0.0 ? 1.0 : -1.0); });
}

Tensor reshape(const Tensor& x, Shape s) {
  // allow a single -1 wildcard
  i64 known = 1;
  int wild = -1;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == -1) {
      if (wild >= 0) throw std::invalid_argument("reshape: multiple -1 dims");
      wild = static_cast<int>(i);
    } else {
      known *= s[i];
    }
  }
  if (wild >= 0) s[wild] = x.numel() / known;
  if (shape_numel(s) != x.numel()) {
    throw ShapeMismatchError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(s));
  }
  Array out(s);
  out.v = x.val().v;
  return make_op(std::move(out), {x}, [x](Node& self) {
    if (!x.requires_grad()) return;
    Array gx = Array::zeros(x.shape());
    gx.v = self.grad.v;
    x.node()->accumulate_grad(gx);
  });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = xs[0].shape();
  Shape os = s0;
  i64 axis_total = 0;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    if (static_cast<int>(s.size()) != static_cast<int>(s0.size()))
      throw ShapeMismatchError("concat: rank mismatch");
    for (size_t d = 0; d < s.size(); ++d) {
      if (static_cast<int>(d) != axis && s[d] != s0[d])
        throw ShapeMismatchError("concat: shape mismatch at dim " + std::to_string(d));
    }
    axis_total += s[axis];
  }
  os[axis] = axis_total;

  i64 outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= os[d];
  for (size_t d = axis + 1; d < os.size(); ++d) inner *= os[d];

  Array out(os);
  i64 off = 0;
  for (const auto& t : xs) {
    const i64 len = t.shape()[axis];
    const Array& v = t.val();
    for (i64 o = 0; o < outer; ++o) {
      std::copy_n(v.data() + o * len * inner, len * inner,
                  out.data() + (o * axis_total + off) * inner);
    }
    off += len;
  }
  return make_op(std::move(out), xs, [xs, axis_total, outer, inner](Node& self) {
    i64 off = 0;
    for (const auto& t : xs) {
      i64 axis_len = t.numel() / (outer * inner);
      if (t.requires_grad()) {
        Array g = Array::zeros(t.shape());
        for (i64 o = 0; o < outer; ++o) {
          std::copy_n(self.grad.data() + (o * axis_total + off) * inner, axis_len * inner,
                      g.data() + o * axis_len * inner);
        }
        t.node()->accumulate_grad(g);
      }
      off += axis_len;
    }
  });
}

Tensor narrow(const Tensor& x, int axis, i64 start, i64 len) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()) || start < 0 || start + len > s[axis])
    throw std::invalid_argument("narrow: range out of bounds");
  Shape os = s;
  os[axis] = len;
  i64 outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  Array out(os);
  for (i64 o = 0; o < outer; ++o) {
    std::copy_n(x.val().data() + (o * s[axis] + start) * inner, len * inner,
                out.data() + o * len * inner);
  }
  i64 axis_len = s[axis];
  return make_op(std::move(out), {x}, [x, outer, inner, axis_len, start, len](Node& self) {
    if (!x.requires_grad()) return;
    Array g = Array::zeros(x.shape());
    for (i64 o = 0; o < outer; ++o) {
      const double* src = self.grad.data() + o * len * inner;
      double* dst = g.data() + (o * axis_len + start) * inner;
      for (i64 i = 0; i < len * inner; ++i) dst[i] += src[i];
    }
    x.node()->accumulate_grad(g);
  });
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (i64 i = 0; i < x.numel(); ++i) s += x.val()[i];
  return make_op(Array::scalar(s), {x}, [x](Node& self) {
    if (!x.requires_grad()) return;
    Array g = Array::full(x.shape(), self.grad[0]);
    x.node()->accumulate_grad(g);
  });
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
    throw ShapeMismatchError("linear: expected x [B,Cin], w [Cout,Cin]");
  const i64 B = x.dim(0), Cin = x.dim(1), Cout = w.dim(0);
  Array out({B, Cout});
  for (i64 i = 0; i < B; ++i) {
    for (i64 o = 0; o < Cout; ++o) {
      double acc = b.defined() ? b.val()[o] : 0.0;
      const double* xr = x.val().data() + i * Cin;
      const double* wr = w.val().data() + o * Cin;
      for (i64 c = 0; c < Cin; ++c) acc += xr[c] * wr[c];
      out[i * Cout + o] = acc;
    }
  }
  return make_op(std::move(out), {x, w, b}, [x, w, b, B, Cin, Cout](Node& self) {
    const Array& g = self.grad;
    if (x.requires_grad()) {
      Array gx = Array::zeros({B, Cin});
      for (i64 i = 0; i < B; ++i)
        for (i64 c = 0; c < Cin; ++c) {
          double acc = 0.0;
          for (i64 o = 0; o < Cout; ++o) acc += g[i * Cout + o] * w.val()[o * Cin + c];
          gx[i * Cin + c] = acc;
        }
      x.node()->accumulate_grad(gx);
    }
    if (w.requires_grad()) {
      Array gw = Array::zeros({Cout, Cin});
      for (i64 o = 0; o < Cout; ++o)
        for (i64 c = 0; c < Cin; ++c) {
          double acc = 0.0;
          for (i64 i = 0; i < B; ++i) acc += g[i * Cout + o] * x.val()[i * Cin + c];
          gw[o * Cin + c] = acc;
        }
      w.node()->accumulate_grad(gw);
    }
    if (b.defined() && b.requires_grad()) {
      Array gb = Array::zeros({Cout});
      for (i64 i = 0; i < B; ++i)
        for (i64 o = 0; o < Cout; ++o) gb[o] += g[i * Cout + o];
      b.node()->accumulate_grad(gb);
    }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() < 3) throw ShapeMismatchError("global_avg_pool: expected [B,C,*spatial]");
  const i64 B = x.dim(0), C = x.dim(1);
  i64 spatial = 1;
  for (int d = 2; d < x.rank(); ++d) spatial *= x.dim(d);
  Array out({B, C});
  for (i64 bc = 0; bc < B * C; ++bc) {
    const double* p = x.val().data() + bc * spatial;
    double s = 0.0;
    for (i64 i = 0; i < spatial; ++i) s += p[i];
    out[bc] = s / static_cast<double>(spatial);
  }
  return make_op(std::move(out), {x}, [x, B, C, spatial](Node& self) {
    if (!x.requires_grad()) return;
    Array g = Array::zeros(x.shape());
    const double inv = 1.0 / static_cast<double>(spatial);
    for (i64 bc = 0; bc < B * C; ++bc) {
      double gv = self.grad[bc] * inv;
      double* p = g.data() + bc * spatial;
      for (i64 i = 0; i < spatial; ++i) p[i] = gv;
    }
    x.node()->accumulate_grad(g);
  });
}

Tensor softmax(const Tensor& x, int axis) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw std::invalid_argument("softmax: bad axis");
  i64 outer = 1, inner = 1;
  const i64 n = s[axis];
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];

  Array out(s);
  const Array& xv = x.val();
  for (i64 o = 0; o < outer; ++o) {
    for (i64 in = 0; in < inner; ++in) {
      const i64 base = o * n * inner + in;
      double m = -1e300;
      for (i64 i = 0; i < n; ++i) m = std::max(m, xv[base + i * inner]);
      double z = 0.0;
      for (i64 i = 0; i < n; ++i) {
        double e = std::exp(xv[base + i * inner] - m);
        out[base + i * inner] = e;
        z += e;
      }
      for (i64 i = 0; i < n; ++i) out[base + i * inner] /= z;
    }
  }
  Array saved = out;  // probs needed for backward
  return make_op(std::move(out), {x}, [x, saved, outer, inner, n](Node& self) {
    if (!x.requires_grad()) return;
    Array g = Array::zeros(x.shape());
    for (i64 o = 0; o < outer; ++o) {
      for (i64 in = 0; in < inner; ++in) {
        const i64 base = o * n * inner + in;
        double dot = 0.0;
        for (i64 i = 0; i < n; ++i) dot += self.grad[base + i * inner] * saved[base + i * inner];
        for (i64 i = 0; i < n; ++i) {
          const i64 p = base + i * inner;
          g[p] = saved[p] * (self.grad[p] - dot);
        }
      }
    }
    x.node()->accumulate_grad(g);
  });
}

Tensor group_l2_normalize(const Tensor& x, i64 groups, double eps) {
  if (x.rank() != 4) throw ShapeMismatchError("group_l2_normalize: expected [B,C,H,W]");
  const i64 B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C % groups != 0)
    throw GroupDivisibilityError("group_l2_normalize: C=" + std::to_string(C) +
                                 " not divisible by G=" + std::to_string(groups));
  const i64 cs = C / groups;  // channels per group
  const i64 HW = H * W;
  Array out(x.shape());
  Array norms({B, groups, H, W});
  const Array& xv = x.val();
  for (i64 b = 0; b < B; ++b) {
    for (i64 g = 0; g < groups; ++g) {
      for (i64 p = 0; p < HW; ++p) {
        double sq = 0.0;
        for (i64 c = 0; c < cs; ++c) {
          double v = xv[((b * C + g * cs + c) * HW) + p];
          sq += v * v;
        }
        double nrm = std::sqrt(sq);
        norms[((b * groups + g) * HW) + p] = nrm;
        double inv = 1.0 / (nrm + eps);
        for (i64 c = 0; c < cs; ++c) {
          const i64 idx = ((b * C + g * cs + c) * HW) + p;
          out[idx] = xv[idx] * inv;
        }
      }
    }
  }
  return make_op(std::move(out), {x}, [x, norms, B, C, groups, cs, HW, eps](Node& self) {
    if (!x.requires_grad()) return;
    Array gx = Array::zeros(x.shape());
    const Array& xv = x.val();
    const Array& g = self.grad;
    for (i64 b = 0; b < B; ++b) {
      for (i64 gr = 0; gr < groups; ++gr) {
        for (i64 p = 0; p < HW; ++p) {
          const double nrm = norms[((b * groups + gr) * HW) + p];
          const double denom = nrm + eps;
          double vg = 0.0;  // <v, grad>
          for (i64 c = 0; c < cs; ++c) {
            const i64 idx = ((b * C + gr * cs + c) * HW) + p;
            vg += xv[idx] * g[idx];
          }
          // d(v_i/(n+eps))/dv_j = delta_ij/(n+eps) - v_i v_j / (n (n+eps)^2)
          const double corr = nrm > 1e-300 ? vg / (nrm * denom * denom) : 0.0;
          for (i64 c = 0; c < cs; ++c) {
            const i64 idx = ((b * C + gr * cs + c) * HW) + p;
            gx[idx] = g[idx] / denom - xv[idx] * corr;
          }
        }
      }
    }
    x.node()->accumulate_grad(gx);
  });
}

Tensor gwc_volume(const Tensor& left, const Tensor& right, i64 groups, i64 disparity_levels) {
  if (left.rank() != 4 || !same_shape(left.shape(), right.shape()))
    throw ShapeMismatchError("gwc_volume: left/right must both be [B,C,H,W]");
  const i64 B = left.dim(0), C = left.dim(1), H = left.dim(2), W = left.dim(3);
  if (C % groups != 0)
    throw GroupDivisibilityError("gwc_volume: C=" + std::to_string(C) +
                                 " not divisible by G=" + std::to_string(groups));
  const i64 cs = C / groups;
  const double sc = static_cast<double>(groups) / static_cast<double>(C);
  const i64 D = disparity_levels;
  Array out({B, groups, D, H, W});
  const double* L = left.val().data();
  const double* R = right.val().data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (i64 bg = 0; bg < B * groups; ++bg) {
    const i64 b = bg / groups, g = bg % groups;
    for (i64 d = 0; d < D; ++d) {
      for (i64 y = 0; y < H; ++y) {
        for (i64 x = d; x < W; ++x) {
          double acc = 0.0;
          for (i64 c = 0; c < cs; ++c) {
            const i64 ch = b * C + g * cs + c;
            acc += L[(ch * H + y) * W + x] * R[(ch * H + y) * W + x - d];
          }
          out[(((bg * D) + d) * H + y) * W + x] = sc * acc;
        }
      }
    }
  }
  return make_op(std::move(out), {left, right},
                 [left, right, B, C, groups, cs, D, H, W, sc](Node& self) {
    const double* G = self.grad.data();
    const double* L = left.val().data();
    const double* R = right.val().data();
    auto vol_idx = [&](i64 b, i64 g, i64 d, i64 y, i64 x) {
      return ((((b * groups) + g) * D + d) * H + y) * W + x;
    };
    if (left.requires_grad()) {
      Array gl = Array::zeros(left.shape());
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (i64 bc = 0; bc < B * C; ++bc) {
        const i64 b = bc / C, c = bc % C, g = c / cs;
        for (i64 y = 0; y < H; ++y) {
          for (i64 x = 0; x < W; ++x) {
            double acc = 0.0;
            const i64 dmax = std::min(D - 1, x);
            for (i64 d = 0; d <= dmax; ++d)
              acc += G[vol_idx(b, g, d, y, x)] * R[(bc * H + y) * W + x - d];
            gl[(bc * H + y) * W + x] = sc * acc;
          }
        }
      }
      left.node()->accumulate_grad(gl);
    }
    if (right.requires_grad()) {
      Array gr = Array::zeros(right.shape());
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (i64 bc = 0; bc < B * C; ++bc) {
        const i64 b = bc / C, c = bc % C, g = c / cs;
        for (i64 y = 0; y < H; ++y) {
          for (i64 x = 0; x < W; ++x) {
            double acc = 0.0;
            const i64 dmax = std::min(D - 1, W - 1 - x);
            for (i64 d = 0; d <= dmax; ++d)
              acc += G[vol_idx(b, g, d, y, x + d)] * L[(bc * H + y) * W + x + d];
            gr[(bc * H + y) * W + x] = sc * acc;
          }
        }
      }
      right.node()->accumulate_grad(gr);
    }
  });
}

Tensor topk_expectation(const Tensor& volume, i64 k) {
  if (volume.rank() != 4) throw ShapeMismatchError("topk_expectation: expected [B,D,H,W]");
  const i64 B = volume.dim(0), D = volume.dim(1), H = volume.dim(2), W = volume.dim(3);
  if (k < 1 || k > D)
    throw std::invalid_argument("topk_expectation: k=" + std::to_string(k) +
                                " out of range for D=" + std::to_string(D));
  const i64 HW = H * W;
  Array out({B, H, W});
  // saved per pixel: k selected indices and their softmax weights
  auto sel = std::make_shared<std::vector<i64>>(static_cast<size_t>(B * HW * k));
  auto wts = std::make_shared<std::vector<double>>(static_cast<size_t>(B * HW * k));
  const Array& v = volume.val();
  for (i64 b = 0; b < B; ++b) {
    for (i64 p = 0; p < HW; ++p) {
      const i64 base = b * D * HW + p;
      // selection sort of the k best; ties keep the lowest disparity index
      std::vector<i64> idx(D);
      for (i64 i = 0; i < D; ++i) idx[i] = i;
      std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](i64 a, i64 c) {
        double va = v[base + a * HW], vc = v[base + c * HW];
        return va > vc || (va == vc && a < c);
      });
      double m = v[base + idx[0] * HW];
      double z = 0.0;
      for (i64 i = 0; i < k; ++i) z += std::exp(v[base + idx[i] * HW] - m);
      double dhat = 0.0;
      const i64 sbase = (b * HW + p) * k;
      for (i64 i = 0; i < k; ++i) {
        double w = std::exp(v[base + idx[i] * HW] - m) / z;
        (*sel)[sbase + i] = idx[i];
        (*wts)[sbase + i] = w;
        dhat += static_cast<double>(idx[i]) * w;
      }
      out[b * HW + p] = dhat;
    }
  }
  Array saved_out = out;
  return make_op(std::move(out), {volume}, [volume, sel, wts, saved_out, B, D, HW, k](Node& self) {
    if (!volume.requires_grad()) return;
    Array g = Array::zeros(volume.shape());
    for (i64 b = 0; b < B; ++b) {
      for (i64 p = 0; p < HW; ++p) {
        const double go = self.grad[b * HW + p];
        const double dhat = saved_out[b * HW + p];
        const i64 sbase = (b * HW + p) * k;
        for (i64 i = 0; i < k; ++i) {
          const i64 d = (*sel)[sbase + i];
          const double w = (*wts)[sbase + i];
          g[(b * D + d) * HW + p] = go * w * (static_cast<double>(d) - dhat);
        }
      }
    }
    volume.node()->accumulate_grad(g);
  });
}

Tensor convex_upsample(const Tensor& disp, const Tensor& weights) {
  if (disp.rank() != 3) throw ShapeMismatchError("convex_upsample: disp must be [B,h,w]");
  const i64 B = disp.dim(0), h = disp.dim(1), w = disp.dim(2);
  Shape ws = weights.shape();
  if (ws != Shape{B, 9, 4, 4, h, w})
    throw ShapeMismatchError("convex_upsample: weights must be [B,9,4,4,h,w], got " +
                             shape_str(ws));
  const i64 H = 4 * h, W = 4 * w;
  Array out({B, H, W});
  const Array& dv = disp.val();
  const Array& wv = weights.val();
  auto widx = [&](i64 b, i64 j, i64 r, i64 c, i64 y, i64 x) {
    return ((((b * 9 + j) * 4 + r) * 4 + c) * h + y) * w + x;
  };
  auto clampi = [](i64 v, i64 hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
  for (i64 b = 0; b < B; ++b) {
    for (i64 Y = 0; Y < h; ++Y) {
      for (i64 X = 0; X < w; ++X) {
        for (i64 r = 0; r < 4; ++r) {
          for (i64 c = 0; c < 4; ++c) {
            double acc = 0.0;
            for (i64 j = 0; j < 9; ++j) {
              const i64 yy = clampi(Y + j / 3 - 1, h - 1);
              const i64 xx = clampi(X + j % 3 - 1, w - 1);
              acc += wv[widx(b, j, r, c, Y, X)] * dv[(b * h + yy) * w + xx];
            }
            out[(b * H + 4 * Y + r) * W + 4 * X + c] = 4.0 * acc;
          }
        }
      }
    }
  }
  return make_op(std::move(out), {disp, weights}, [disp, weights, B, h, w, H, W](Node& self) {
    auto widx = [&](i64 b, i64 j, i64 r, i64 c, i64 y, i64 x) {
      return ((((b * 9 + j) * 4 + r) * 4 + c) * h + y) * w + x;
    };
    auto clampi = [](i64 v, i64 hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
    const Array& g = self.grad;
    if (weights.requires_grad()) {
      Array gw = Array::zeros(weights.shape());
      const Array& dv = disp.val();
      for (i64 b = 0; b < B; ++b)
        for (i64 Y = 0; Y < h; ++Y)
          for (i64 X = 0; X < w; ++X)
            for (i64 r = 0; r < 4; ++r)
              for (i64 c = 0; c < 4; ++c) {
                const double go = 4.0 * g[(b * H + 4 * Y + r) * W + 4 * X + c];
                for (i64 j = 0; j < 9; ++j) {
                  const i64 yy = clampi(Y + j / 3 - 1, h - 1);
                  const i64 xx = clampi(X + j % 3 - 1, w - 1);
                  gw[widx(b, j, r, c, Y, X)] = go * dv[(b * h + yy) * w + xx];
                }
              }
      weights.node()->accumulate_grad(gw);
    }
    if (disp.requires_grad()) {
      // scatter form; sequential on purpose so accumulation order is fixed
      Array gd = Array::zeros(disp.shape());
      const Array& wv = weights.val();
      for (i64 b = 0; b < B; ++b)
        for (i64 Y = 0; Y < h; ++Y)
          for (i64 X = 0; X < w; ++X)
            for (i64 r = 0; r < 4; ++r)
              for (i64 c = 0; c < 4; ++c) {
                const double go = 4.0 * g[(b * H + 4 * Y + r) * W + 4 * X + c];
                for (i64 j = 0; j < 9; ++j) {
                  const i64 yy = clampi(Y + j / 3 - 1, h - 1);
                  const i64 xx = clampi(X + j % 3 - 1, w - 1);
                  gd[(b * h + yy) * w + xx] += go * wv[widx(b, j, r, c, Y, X)];
                }
              }
      disp.node()->accumulate_grad(gd);
    }
  });
}

}  // namespace gs
