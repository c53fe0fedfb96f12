#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "ghoststereo/errors.hpp"
#include "ghoststereo/ops.hpp"

// Direct n-d convolution kernels (2 or 3 spatial dims). 2D tensors are
// processed as 3D with a unit depth axis, so there is a single code path.
// All backward passes are written gather-style or scatter into a slice
// owned by one thread, so results do not depend on the thread count.

namespace gs {

namespace {

struct Dims3 {
  i64 d = 1, h = 1, w = 1;
  i64 numel() const { return d * h * w; }
};

i64 floor_div(i64 a, i64 b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
i64 ceil_div(i64 a, i64 b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }

// Valid output range [lo, hi) for one kernel offset: i = o*s - p + k in [0, n_in).
void out_range(i64 k, i64 s, i64 p, i64 n_in, i64 n_out, i64& lo, i64& hi) {
  lo = std::max<i64>(0, ceil_div(p - k, s));
  hi = std::min<i64>(n_out, floor_div(n_in - 1 + p - k, s) + 1);
}

Dims3 spatial_of(const Shape& s) {
  Dims3 r;
  if (s.size() == 4) {
    r.h = s[2];
    r.w = s[3];
  } else {
    r.d = s[2];
    r.h = s[3];
    r.w = s[4];
  }
  return r;
}

void pad3(std::vector<i64> v, i64 fill, i64 out[3]) {
  out[0] = fill;
  out[1] = fill;
  out[2] = fill;
  const int n = static_cast<int>(v.size());
  for (int i = 0; i < n; ++i) out[3 - n + i] = v[i];
}

}  // namespace

Tensor conv_nd(const Tensor& x, const Tensor& w, const Tensor& bias, const ConvOpts& opts) {
  const int rank = x.rank();
  if (rank != 4 && rank != 5) throw ShapeMismatchError("conv_nd: input must be 4-d or 5-d");
  if (w.rank() != rank) throw ShapeMismatchError("conv_nd: weight rank mismatch");
  const i64 B = x.dim(0), C = x.dim(1);
  const i64 Cout = w.dim(0), Cg = w.dim(1);
  const i64 groups = opts.groups;
  if (C != Cg * groups || Cout % groups != 0)
    throw ShapeMismatchError("conv_nd: channels " + std::to_string(C) + " vs weight " +
                             shape_str(w.shape()) + " groups " + std::to_string(groups));

  const Dims3 in = spatial_of(x.shape());
  Dims3 k;
  if (rank == 4) {
    k.h = w.dim(2);
    k.w = w.dim(3);
  } else {
    k.d = w.dim(2);
    k.h = w.dim(3);
    k.w = w.dim(4);
  }
  i64 st[3], pd[3];
  pad3(opts.stride, 1, st);
  pad3(opts.padding, 0, pd);

  Dims3 out;
  out.d = (in.d + 2 * pd[0] - k.d) / st[0] + 1;
  out.h = (in.h + 2 * pd[1] - k.h) / st[1] + 1;
  out.w = (in.w + 2 * pd[2] - k.w) / st[2] + 1;
  if (out.d < 1 || out.h < 1 || out.w < 1)
    throw ShapeMismatchError("conv_nd: kernel larger than padded input");

  Shape os = rank == 4 ? Shape{B, Cout, out.h, out.w} : Shape{B, Cout, out.d, out.h, out.w};
  Array y(os);

  const double* X = x.val().data();
  const double* Wt = w.val().data();
  const double* Bv = bias.defined() ? bias.val().data() : nullptr;
  double* Y = y.data();
  const i64 in_n = in.numel(), out_n = out.numel(), k_n = k.numel();
  const i64 cout_per_g = Cout / groups;

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (i64 bc = 0; bc < B * Cout; ++bc) {
    const i64 b = bc / Cout, co = bc % Cout;
    const i64 g = co / cout_per_g;
    double* yp = Y + bc * out_n;
    const double fill = Bv ? Bv[co] : 0.0;
    std::fill_n(yp, out_n, fill);
    for (i64 cig = 0; cig < Cg; ++cig) {
      const double* xp = X + (b * C + g * Cg + cig) * in_n;
      const double* wp = Wt + (co * Cg + cig) * k_n;
      for (i64 kd = 0; kd < k.d; ++kd) {
        i64 dlo, dhi;
        out_range(kd, st[0], pd[0], in.d, out.d, dlo, dhi);
        for (i64 kh = 0; kh < k.h; ++kh) {
          i64 hlo, hhi;
          out_range(kh, st[1], pd[1], in.h, out.h, hlo, hhi);
          for (i64 kw = 0; kw < k.w; ++kw) {
            i64 wlo, whi;
            out_range(kw, st[2], pd[2], in.w, out.w, wlo, whi);
            const double wv = wp[(kd * k.h + kh) * k.w + kw];
            if (wv == 0.0) continue;
            for (i64 od = dlo; od < dhi; ++od) {
              const i64 id = od * st[0] - pd[0] + kd;
              for (i64 oh = hlo; oh < hhi; ++oh) {
                const i64 ih = oh * st[1] - pd[1] + kh;
                const double* xr = xp + (id * in.h + ih) * in.w;
                double* yr = yp + (od * out.h + oh) * out.w;
                i64 iw = wlo * st[2] - pd[2] + kw;
                for (i64 ow = wlo; ow < whi; ++ow, iw += st[2]) {
                  yr[ow] += wv * xr[iw];
                }
              }
            }
          }
        }
      }
    }
  }

  Dims3 ind = in, outd = out, kd3 = k;
  i64 st0 = st[0], st1 = st[1], st2 = st[2], pd0 = pd[0], pd1 = pd[1], pd2 = pd[2];
  return make_op(std::move(y), {x, w, bias},
                 [x, w, bias, B, C, Cout, Cg, groups, cout_per_g, ind, outd, kd3, st0, st1, st2,
                  pd0, pd1, pd2](Node& self) {
    const i64 in_n = ind.numel(), out_n = outd.numel(), k_n = kd3.numel();
    const i64 st[3] = {st0, st1, st2};
    const i64 pd[3] = {pd0, pd1, pd2};
    const double* G = self.grad.data();
    const double* X = x.val().data();
    const double* Wt = w.val().data();

    if (x.requires_grad()) {
      Array gx = Array::zeros(x.shape());
      double* GX = gx.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (i64 bc = 0; bc < B * C; ++bc) {
        const i64 b = bc / C, ci = bc % C;
        const i64 g = ci / Cg, cig = ci % Cg;
        double* gxp = GX + bc * in_n;
        for (i64 coi = 0; coi < cout_per_g; ++coi) {
          const i64 co = g * cout_per_g + coi;
          const double* gp = G + (b * Cout + co) * out_n;
          const double* wp = Wt + (co * Cg + cig) * k_n;
          for (i64 kd = 0; kd < kd3.d; ++kd) {
            i64 dlo, dhi;
            out_range(kd, st[0], pd[0], ind.d, outd.d, dlo, dhi);
            for (i64 kh = 0; kh < kd3.h; ++kh) {
              i64 hlo, hhi;
              out_range(kh, st[1], pd[1], ind.h, outd.h, hlo, hhi);
              for (i64 kw = 0; kw < kd3.w; ++kw) {
                i64 wlo, whi;
                out_range(kw, st[2], pd[2], ind.w, outd.w, wlo, whi);
                const double wv = wp[(kd * kd3.h + kh) * kd3.w + kw];
                if (wv == 0.0) continue;
                for (i64 od = dlo; od < dhi; ++od) {
                  const i64 id = od * st[0] - pd[0] + kd;
                  for (i64 oh = hlo; oh < hhi; ++oh) {
                    const i64 ih = oh * st[1] - pd[1] + kh;
                    const double* gr = gp + (od * outd.h + oh) * outd.w;
                    double* gxr = gxp + (id * ind.h + ih) * ind.w;
                    i64 iw = wlo * st[2] - pd[2] + kw;
                    for (i64 ow = wlo; ow < whi; ++ow, iw += st[2]) {
                      gxr[iw] += wv * gr[ow];
                    }
                  }
                }
              }
            }
          }
        }
      }
      x.node()->accumulate_grad(gx);
    }

    if (w.requires_grad()) {
      Array gw = Array::zeros(w.shape());
      double* GW = gw.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (i64 cc = 0; cc < Cout * Cg; ++cc) {
        const i64 co = cc / Cg, cig = cc % Cg;
        const i64 g = co / cout_per_g;
        const i64 ci = g * Cg + cig;
        double* gwp = GW + cc * k_n;
        for (i64 kd = 0; kd < kd3.d; ++kd) {
          i64 dlo, dhi;
          out_range(kd, st[0], pd[0], ind.d, outd.d, dlo, dhi);
          for (i64 kh = 0; kh < kd3.h; ++kh) {
            i64 hlo, hhi;
            out_range(kh, st[1], pd[1], ind.h, outd.h, hlo, hhi);
            for (i64 kw = 0; kw < kd3.w; ++kw) {
              i64 wlo, whi;
              out_range(kw, st[2], pd[2], ind.w, outd.w, wlo, whi);
              double acc = 0.0;
              for (i64 b = 0; b < B; ++b) {
                const double* gp = G + (b * Cout + co) * out_n;
                const double* xp = X + (b * C + ci) * in_n;
                for (i64 od = dlo; od < dhi; ++od) {
                  const i64 id = od * st[0] - pd[0] + kd;
                  for (i64 oh = hlo; oh < hhi; ++oh) {
                    const i64 ih = oh * st[1] - pd[1] + kh;
                    const double* gr = gp + (od * outd.h + oh) * outd.w;
                    const double* xr = xp + (id * ind.h + ih) * ind.w;
                    i64 iw = wlo * st[2] - pd[2] + kw;
                    for (i64 ow = wlo; ow < whi; ++ow, iw += st[2]) {
                      acc += gr[ow] * xr[iw];
                    }
                  }
                }
              }
              gwp[(kd * kd3.h + kh) * kd3.w + kw] = acc;
            }
          }
        }
      }
      w.node()->accumulate_grad(gw);
    }

    if (bias.defined() && bias.requires_grad()) {
      Array gb = Array::zeros({Cout});
      for (i64 b = 0; b < B; ++b) {
        for (i64 co = 0; co < Cout; ++co) {
          const double* gp = G + (b * Cout + co) * out_n;
          double acc = 0.0;
          for (i64 i = 0; i < out_n; ++i) acc += gp[i];
          gb[co] += acc;
        }
      }
      bias.node()->accumulate_grad(gb);
    }
  });
}

Tensor conv_transpose_nd(const Tensor& x, const Tensor& w, const Tensor& bias,
                         const std::vector<i64>& stride, const std::vector<i64>& padding) {
  const int rank = x.rank();
  if (rank != 4 && rank != 5)
    throw ShapeMismatchError("conv_transpose_nd: input must be 4-d or 5-d");
  if (w.rank() != rank) throw ShapeMismatchError("conv_transpose_nd: weight rank mismatch");
  const i64 B = x.dim(0), Cin = x.dim(1);
  if (w.dim(0) != Cin) throw ShapeMismatchError("conv_transpose_nd: weight Cin mismatch");
  const i64 Cout = w.dim(1);

  const Dims3 in = spatial_of(x.shape());
  Dims3 k;
  if (rank == 4) {
    k.h = w.dim(2);
    k.w = w.dim(3);
  } else {
    k.d = w.dim(2);
    k.h = w.dim(3);
    k.w = w.dim(4);
  }
  i64 st[3], pd[3];
  pad3(stride, 1, st);
  pad3(padding, 0, pd);

  Dims3 out;
  out.d = (in.d - 1) * st[0] - 2 * pd[0] + k.d;
  out.h = (in.h - 1) * st[1] - 2 * pd[1] + k.h;
  out.w = (in.w - 1) * st[2] - 2 * pd[2] + k.w;
  if (out.d < 1 || out.h < 1 || out.w < 1)
    throw ShapeMismatchError("conv_transpose_nd: empty output");

  Shape os = rank == 4 ? Shape{B, Cout, out.h, out.w} : Shape{B, Cout, out.d, out.h, out.w};
  Array y(os);
  const double* X = x.val().data();
  const double* Wt = w.val().data();
  const double* Bv = bias.defined() ? bias.val().data() : nullptr;
  double* Y = y.data();
  const i64 in_n = in.numel(), out_n = out.numel(), k_n = k.numel();

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (i64 bc = 0; bc < B * Cout; ++bc) {
    const i64 b = bc / Cout, co = bc % Cout;
    double* yp = Y + bc * out_n;
    std::fill_n(yp, out_n, Bv ? Bv[co] : 0.0);
    for (i64 ci = 0; ci < Cin; ++ci) {
      const double* xp = X + (b * Cin + ci) * in_n;
      const double* wp = Wt + (ci * Cout + co) * k_n;
      for (i64 kd = 0; kd < k.d; ++kd) {
        for (i64 kh = 0; kh < k.h; ++kh) {
          for (i64 kw = 0; kw < k.w; ++kw) {
            const double wv = wp[(kd * k.h + kh) * k.w + kw];
            if (wv == 0.0) continue;
            for (i64 id = 0; id < in.d; ++id) {
              const i64 od = id * st[0] - pd[0] + kd;
              if (od < 0 || od >= out.d) continue;
              for (i64 ih = 0; ih < in.h; ++ih) {
                const i64 oh = ih * st[1] - pd[1] + kh;
                if (oh < 0 || oh >= out.h) continue;
                const double* xr = xp + (id * in.h + ih) * in.w;
                double* yr = yp + (od * out.h + oh) * out.w;
                for (i64 iw = 0; iw < in.w; ++iw) {
                  const i64 ow = iw * st[2] - pd[2] + kw;
                  if (ow < 0 || ow >= out.w) continue;
                  yr[ow] += wv * xr[iw];
                }
              }
            }
          }
        }
      }
    }
  }

  Dims3 ind = in, outd = out, kd3 = k;
  i64 st0 = st[0], st1 = st[1], st2 = st[2], pd0 = pd[0], pd1 = pd[1], pd2 = pd[2];
  return make_op(std::move(y), {x, w, bias},
                 [x, w, bias, B, Cin, Cout, ind, outd, kd3, st0, st1, st2, pd0, pd1,
                  pd2](Node& self) {
    const i64 in_n = ind.numel(), out_n = outd.numel(), k_n = kd3.numel();
    const i64 st[3] = {st0, st1, st2};
    const i64 pd[3] = {pd0, pd1, pd2};
    const double* G = self.grad.data();
    const double* X = x.val().data();
    const double* Wt = w.val().data();

    if (x.requires_grad()) {
      Array gx = Array::zeros(x.shape());
      double* GX = gx.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (i64 bc = 0; bc < B * Cin; ++bc) {
        const i64 b = bc / Cin, ci = bc % Cin;
        double* gxp = GX + bc * in_n;
        for (i64 co = 0; co < Cout; ++co) {
          const double* gp = G + (b * Cout + co) * out_n;
          const double* wp = Wt + (ci * Cout + co) * k_n;
          for (i64 kd = 0; kd < kd3.d; ++kd) {
            for (i64 kh = 0; kh < kd3.h; ++kh) {
              for (i64 kw = 0; kw < kd3.w; ++kw) {
                const double wv = wp[(kd * kd3.h + kh) * kd3.w + kw];
                if (wv == 0.0) continue;
                for (i64 id = 0; id < ind.d; ++id) {
                  const i64 od = id * st[0] - pd[0] + kd;
                  if (od < 0 || od >= outd.d) continue;
                  for (i64 ih = 0; ih < ind.h; ++ih) {
                    const i64 oh = ih * st[1] - pd[1] + kh;
                    if (oh < 0 || oh >= outd.h) continue;
                    double* gxr = gxp + (id * ind.h + ih) * ind.w;
                    const double* gr = gp + (od * outd.h + oh) * outd.w;
                    for (i64 iw = 0; iw < ind.w; ++iw) {
                      const i64 ow = iw * st[2] - pd[2] + kw;
                      if (ow < 0 || ow >= outd.w) continue;
                      gxr[iw] += wv * gr[ow];
                    }
                  }
                }
              }
            }
          }
        }
      }
      x.node()->accumulate_grad(gx);
    }

    if (w.requires_grad()) {
      Array gw = Array::zeros(w.shape());
      double* GW = gw.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (i64 cc = 0; cc < Cin * Cout; ++cc) {
        const i64 ci = cc / Cout, co = cc % Cout;
        double* gwp = GW + cc * k_n;
        for (i64 kd = 0; kd < kd3.d; ++kd) {
          for (i64 kh = 0; kh < kd3.h; ++kh) {
            for (i64 kw = 0; kw < kd3.w; ++kw) {
              double acc = 0.0;
              for (i64 b = 0; b < B; ++b) {
                const double* xp = X + (b * Cin + ci) * in_n;
                const double* gp = G + (b * Cout + co) * out_n;
                for (i64 id = 0; id < ind.d; ++id) {
                  const i64 od = id * st[0] - pd[0] + kd;
                  if (od < 0 || od >= outd.d) continue;
                  for (i64 ih = 0; ih < ind.h; ++ih) {
                    const i64 oh = ih * st[1] - pd[1] + kh;
                    if (oh < 0 || oh >= outd.h) continue;
                    const double* xr = xp + (id * ind.h + ih) * ind.w;
                    const double* gr = gp + (od * outd.h + oh) * outd.w;
                    for (i64 iw = 0; iw < ind.w; ++iw) {
                      const i64 ow = iw * st[2] - pd[2] + kw;
                      if (ow < 0 || ow >= outd.w) continue;
                      acc += xr[iw] * gr[ow];
                    }
                  }
                }
              }
              gwp[(kd * kd3.h + kh) * kd3.w + kw] = acc;
            }
          }
        }
      }
      w.node()->accumulate_grad(gw);
    }

    if (bias.defined() && bias.requires_grad()) {
      Array gb = Array::zeros({Cout});
      for (i64 b = 0; b < B; ++b) {
        for (i64 co = 0; co < Cout; ++co) {
          const double* gp = G + (b * Cout + co) * out_n;
          double acc = 0.0;
          for (i64 i = 0; i < out_n; ++i) acc += gp[i];
          gb[co] += acc;
        }
      }
      bias.node()->accumulate_grad(gb);
    }
  });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Array& running_mean,
                  Array& running_var, bool training, double momentum, double eps) {
  if (x.rank() < 3) throw ShapeMismatchError("batch_norm: expected [B,C,*spatial]");
  const i64 B = x.dim(0), C = x.dim(1);
  i64 spatial = 1;
  for (int d = 2; d < x.rank(); ++d) spatial *= x.dim(d);
  const i64 N = B * spatial;
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C)
    throw ShapeMismatchError("batch_norm: parameter size mismatch");

  Array y(x.shape());
  auto xhat = std::make_shared<Array>(x.shape());
  auto invstd = std::make_shared<Array>(Shape{C});
  const Array& xv = x.val();
  const Array& gv = gamma.val();
  const Array& bv = beta.val();

  for (i64 c = 0; c < C; ++c) {
    double mean, var;
    if (training) {
      double s = 0.0;
      for (i64 b = 0; b < B; ++b) {
        const double* p = xv.data() + (b * C + c) * spatial;
        for (i64 i = 0; i < spatial; ++i) s += p[i];
      }
      mean = s / static_cast<double>(N);
      double sq = 0.0;
      for (i64 b = 0; b < B; ++b) {
        const double* p = xv.data() + (b * C + c) * spatial;
        for (i64 i = 0; i < spatial; ++i) {
          const double d = p[i] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(N);
      const double unbiased = N > 1 ? sq / static_cast<double>(N - 1) : var;
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean;
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const double is = 1.0 / std::sqrt(var + eps);
    (*invstd)[c] = is;
    for (i64 b = 0; b < B; ++b) {
      const double* p = xv.data() + (b * C + c) * spatial;
      double* xh = xhat->data() + (b * C + c) * spatial;
      double* yp = y.data() + (b * C + c) * spatial;
      for (i64 i = 0; i < spatial; ++i) {
        xh[i] = (p[i] - mean) * is;
        yp[i] = gv[c] * xh[i] + bv[c];
      }
    }
  }

  return make_op(std::move(y), {x, gamma, beta},
                 [x, gamma, beta, xhat, invstd, B, C, spatial, N, training](Node& self) {
    const Array& g = self.grad;
    Array gsum({C}), gdot({C});
    for (i64 c = 0; c < C; ++c) {
      double s = 0.0, dt = 0.0;
      for (i64 b = 0; b < B; ++b) {
        const double* gp = g.data() + (b * C + c) * spatial;
        const double* xh = xhat->data() + (b * C + c) * spatial;
        for (i64 i = 0; i < spatial; ++i) {
          s += gp[i];
          dt += gp[i] * xh[i];
        }
      }
      gsum[c] = s;
      gdot[c] = dt;
    }
    if (gamma.requires_grad()) gamma.node()->accumulate_grad(gdot);
    if (beta.requires_grad()) beta.node()->accumulate_grad(gsum);
    if (x.requires_grad()) {
      Array gx = Array::zeros(x.shape());
      const double invN = 1.0 / static_cast<double>(N);
      for (i64 c = 0; c < C; ++c) {
        const double k = gamma.val()[c] * (*invstd)[c];
        for (i64 b = 0; b < B; ++b) {
          const double* gp = g.data() + (b * C + c) * spatial;
          const double* xh = xhat->data() + (b * C + c) * spatial;
          double* gxp = gx.data() + (b * C + c) * spatial;
          if (training) {
            for (i64 i = 0; i < spatial; ++i)
              gxp[i] = k * (gp[i] - gsum[c] * invN - xh[i] * gdot[c] * invN);
          } else {
            for (i64 i = 0; i < spatial; ++i) gxp[i] = k * gp[i];
          }
        }
      }
      x.node()->accumulate_grad(gx);
    }
  });
}

}  // namespace gs
