#pragma once
// 3D convolution (grouped, strided, zero-padded) and trilinear resizing over
// (B, C, T, H, W) volumes.

#include <array>
#include <cmath>
#include <vector>

#include "tensor.hpp"

namespace vf {

using Dims3 = std::array<Index, 3>;

struct Conv3dGeometry {
  Index batch, cin, t, h, w;
  Index cout, groups;
  Dims3 kernel, stride, padding;
  Index to, ho, wo;

  Index cin_g() const { return cin / groups; }
  Index cout_g() const { return cout / groups; }
  Index kvol() const { return kernel[0] * kernel[1] * kernel[2]; }
  Index out_spatial() const { return to * ho * wo; }
  Index in_spatial() const { return t * h * w; }
  // True when the im2col matrix of a channel group is the input itself:
  // unpadded 1x1 spatial kernels that are pointwise in time or span all of it.
  bool col_is_input() const {
    if (padding[0] || padding[1] || padding[2]) return false;
    if (kernel[1] != 1 || kernel[2] != 1 || stride[1] != 1 || stride[2] != 1) return false;
    return (kernel[0] == 1 && stride[0] == 1) || (kernel[0] == t && to == 1);
  }
};

inline Index conv_out_extent(Index in, Index k, Index stride, Index pad) {
  const Index span = in + 2 * pad - k;
  if (span < 0) return 0;
  return span / stride + 1;
}

template <class S>
Conv3dGeometry conv3d_geometry(const Shape& x, const Shape& w, Dims3 stride, Dims3 padding, Index groups) {
  if (x.size() != 5 || w.size() != 5)
    throw ShapeError("conv3d: expected 5-d input and weight, got " + shape_str(x) + " and " + shape_str(w));
  if (groups <= 0 || x[1] % groups != 0 || w[0] % groups != 0)
    throw ConfigError("conv3d: channels " + std::to_string(x[1]) + "->" + std::to_string(w[0]) +
                      " not divisible by groups " + std::to_string(groups));
  if (w[1] != x[1] / groups)
    throw ShapeError("conv3d: weight " + shape_str(w) + " incompatible with input " + shape_str(x) + " and groups " +
                     std::to_string(groups));
  for (int i = 0; i < 3; ++i)
    if (stride[i] <= 0 || padding[i] < 0) throw ConfigError("conv3d: stride must be positive and padding non-negative");
  Conv3dGeometry g{x[0], x[1], x[2], x[3], x[4], w[0], groups, {w[2], w[3], w[4]}, stride, padding, 0, 0, 0};
  g.to = conv_out_extent(g.t, g.kernel[0], stride[0], padding[0]);
  g.ho = conv_out_extent(g.h, g.kernel[1], stride[1], padding[1]);
  g.wo = conv_out_extent(g.w, g.kernel[2], stride[2], padding[2]);
  if (g.to <= 0 || g.ho <= 0 || g.wo <= 0)
    throw ConfigError("conv3d: non-positive output dims for input " + shape_str(x) + " and kernel " + shape_str(w));
  return g;
}

namespace detail {

inline Index floor_div(Index a, Index b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
inline Index ceil_div(Index a, Index b) { return -floor_div(-a, b); }

// col[(c*kvol + k), out_pos] for the channels [c0, c0 + ncols_c) of one batch item.
template <class S>
void im2col3d(const S* x, const Conv3dGeometry& g, Index c0, S* col) {
  const Index L = g.out_spatial();
  for (Index c = 0; c < g.cin_g(); ++c) {
    const S* xc = x + (c0 + c) * g.in_spatial();
    for (Index kt = 0; kt < g.kernel[0]; ++kt)
      for (Index kh = 0; kh < g.kernel[1]; ++kh)
        for (Index kw = 0; kw < g.kernel[2]; ++kw) {
          S* row = col + ((c * g.kernel[0] + kt) * g.kernel[1] * g.kernel[2] + kh * g.kernel[2] + kw) * L;
          Index p = 0;
          for (Index ot = 0; ot < g.to; ++ot) {
            const Index it = ot * g.stride[0] - g.padding[0] + kt;
            const bool tin = it >= 0 && it < g.t;
            for (Index oh = 0; oh < g.ho; ++oh) {
              const Index ih = oh * g.stride[1] - g.padding[1] + kh;
              const bool hin = tin && ih >= 0 && ih < g.h;
              const S* xrow = hin ? xc + (it * g.h + ih) * g.w : nullptr;
              for (Index ow = 0; ow < g.wo; ++ow, ++p) {
                const Index iw = ow * g.stride[2] - g.padding[2] + kw;
                row[p] = (hin && iw >= 0 && iw < g.w) ? xrow[iw] : S(0);
              }
            }
          }
        }
  }
}

template <class S>
void col2im3d(const S* col, const Conv3dGeometry& g, Index c0, S* dx) {
  const Index L = g.out_spatial();
  for (Index c = 0; c < g.cin_g(); ++c) {
    S* xc = dx + (c0 + c) * g.in_spatial();
    for (Index kt = 0; kt < g.kernel[0]; ++kt)
      for (Index kh = 0; kh < g.kernel[1]; ++kh)
        for (Index kw = 0; kw < g.kernel[2]; ++kw) {
          const S* row = col + ((c * g.kernel[0] + kt) * g.kernel[1] * g.kernel[2] + kh * g.kernel[2] + kw) * L;
          Index p = 0;
          for (Index ot = 0; ot < g.to; ++ot) {
            const Index it = ot * g.stride[0] - g.padding[0] + kt;
            const bool tin = it >= 0 && it < g.t;
            for (Index oh = 0; oh < g.ho; ++oh) {
              const Index ih = oh * g.stride[1] - g.padding[1] + kh;
              const bool hin = tin && ih >= 0 && ih < g.h;
              S* xrow = hin ? xc + (it * g.h + ih) * g.w : nullptr;
              for (Index ow = 0; ow < g.wo; ++ow, ++p) {
                const Index iw = ow * g.stride[2] - g.padding[2] + kw;
                if (hin && iw >= 0 && iw < g.w) xrow[iw] += row[p];
              }
            }
          }
        }
  }
}

// Valid output range [lo, hi) along w for each kernel tap kw.
inline void tap_bounds(const Conv3dGeometry& g, std::vector<Index>& lo, std::vector<Index>& hi) {
  lo.resize(g.kernel[2]);
  hi.resize(g.kernel[2]);
  for (Index kw = 0; kw < g.kernel[2]; ++kw) {
    lo[kw] = std::max<Index>(0, ceil_div(g.padding[2] - kw, g.stride[2]));
    hi[kw] = std::min<Index>(g.wo, floor_div(g.w - 1 + g.padding[2] - kw, g.stride[2]) + 1);
  }
}

// Depthwise (one input and one output channel per group) stencil; accumulates into out.
template <class S>
void depthwise_forward(const S* x, const S* w, const Conv3dGeometry& g, S* out) {
  const Index kv = g.kvol(), sw = g.stride[2];
  std::vector<Index> lo, hi;
  tap_bounds(g, lo, hi);
  for (Index c = 0; c < g.cin; ++c) {
    const S* xc = x + c * g.in_spatial();
    const S* wc = w + c * kv;
    S* oc = out + c * g.out_spatial();
    for (Index ot = 0; ot < g.to; ++ot)
      for (Index kt = 0; kt < g.kernel[0]; ++kt) {
        const Index it = ot * g.stride[0] - g.padding[0] + kt;
        if (it < 0 || it >= g.t) continue;
        for (Index oh = 0; oh < g.ho; ++oh)
          for (Index kh = 0; kh < g.kernel[1]; ++kh) {
            const Index ih = oh * g.stride[1] - g.padding[1] + kh;
            if (ih < 0 || ih >= g.h) continue;
            const S* xrow = xc + (it * g.h + ih) * g.w;
            S* __restrict orow = oc + (ot * g.ho + oh) * g.wo;
            for (Index kw = 0; kw < g.kernel[2]; ++kw) {
              const S wv = wc[(kt * g.kernel[1] + kh) * g.kernel[2] + kw];
              const S* __restrict xs = xrow - g.padding[2] + kw;
              if (sw == 1) {
                for (Index ow = lo[kw]; ow < hi[kw]; ++ow) orow[ow] += wv * xs[ow];
              } else {
                for (Index ow = lo[kw]; ow < hi[kw]; ++ow) orow[ow] += wv * xs[ow * sw];
              }
            }
          }
      }
  }
}

template <class S>
void depthwise_backward(const S* x, const S* w, const S* gout, const Conv3dGeometry& g, S* dx, S* dw) {
  const Index kv = g.kvol(), sw = g.stride[2];
  std::vector<Index> lo, hi;
  tap_bounds(g, lo, hi);
  for (Index c = 0; c < g.cin; ++c) {
    const S* xc = x + c * g.in_spatial();
    const S* wc = w + c * kv;
    const S* goc = gout + c * g.out_spatial();
    S* dxc = dx ? dx + c * g.in_spatial() : nullptr;
    S* dwc = dw ? dw + c * kv : nullptr;
    for (Index ot = 0; ot < g.to; ++ot)
      for (Index kt = 0; kt < g.kernel[0]; ++kt) {
        const Index it = ot * g.stride[0] - g.padding[0] + kt;
        if (it < 0 || it >= g.t) continue;
        for (Index oh = 0; oh < g.ho; ++oh)
          for (Index kh = 0; kh < g.kernel[1]; ++kh) {
            const Index ih = oh * g.stride[1] - g.padding[1] + kh;
            if (ih < 0 || ih >= g.h) continue;
            const Index xoff = (it * g.h + ih) * g.w;
            const S* __restrict grow = goc + (ot * g.ho + oh) * g.wo;
            for (Index kw = 0; kw < g.kernel[2]; ++kw) {
              const Index widx = (kt * g.kernel[1] + kh) * g.kernel[2] + kw;
              const Index shift = kw - g.padding[2];
              if (dwc) {
                S acc = 0;
                const S* __restrict xs = xc + xoff + shift;
                if (sw == 1) {
                  for (Index ow = lo[kw]; ow < hi[kw]; ++ow) acc += grow[ow] * xs[ow];
                } else {
                  for (Index ow = lo[kw]; ow < hi[kw]; ++ow) acc += grow[ow] * xs[ow * sw];
                }
                dwc[widx] += acc;
              }
              if (dxc) {
                const S wv = wc[widx];
                S* __restrict ds = dxc + xoff + shift;
                if (sw == 1) {
                  for (Index ow = lo[kw]; ow < hi[kw]; ++ow) ds[ow] += grow[ow] * wv;
                } else {
                  for (Index ow = lo[kw]; ow < hi[kw]; ++ow) ds[ow * sw] += grow[ow] * wv;
                }
              }
            }
          }
      }
  }
}

}  // namespace detail

// Direct 3D convolution. weight: (Cout, Cin/groups, kt, kh, kw); bias: (Cout) or undefined.
// Output extent per axis is floor((in + 2*pad - k)/stride) + 1.
template <class S>
Tensor<S> conv3d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias = {}, Dims3 stride = {1, 1, 1},
                 Dims3 padding = {0, 0, 0}, Index groups = 1) {
  const Conv3dGeometry g = conv3d_geometry<S>(x.shape(), weight.shape(), stride, padding, groups);
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != g.cout))
    throw ShapeError("conv3d: bias " + shape_str(bias.shape()) + " for " + std::to_string(g.cout) + " outputs");
  const Shape out_shape{g.batch, g.cout, g.to, g.ho, g.wo};
  record_flops(FlopCategory::Conv,
               static_cast<std::uint64_t>(g.batch * g.cout * g.out_spatial() * g.cin_g() * g.kvol()));
  const bool meta = detail::any_meta<S>({&x, &weight, &bias});
  const bool depthwise = g.groups == g.cin && g.cout == g.cin;
  const Index L = g.out_spatial();
  const Index ckv = g.cin_g() * g.kvol();

  Buffer<S> out;
  if (!meta) {
    out.assign(static_cast<std::size_t>(numel_of(out_shape)), S(0));
    Buffer<S> col;
    const bool direct = g.col_is_input();
    if (!depthwise && !direct) col.resize(static_cast<std::size_t>(ckv * L));
    for (Index b = 0; b < g.batch; ++b) {
      const S* xb = x.data().data() + b * g.cin * g.in_spatial();
      S* ob = out.data() + b * g.cout * L;
      if (depthwise) {
        detail::depthwise_forward(xb, weight.data().data(), g, ob);
      } else {
        for (Index gr = 0; gr < g.groups; ++gr) {
          const S* cp = xb + gr * g.cin_g() * g.in_spatial();
          if (!direct) {
            detail::im2col3d(xb, g, gr * g.cin_g(), col.data());
            cp = col.data();
          }
          detail::MapR<S>(ob + gr * g.cout_g() * L, g.cout_g(), L).noalias() =
              detail::CMapR<S>(weight.data().data() + gr * g.cout_g() * ckv, g.cout_g(), ckv) *
              detail::CMapR<S>(cp, ckv, L);
        }
      }
      if (bias.defined())
        for (Index c = 0; c < g.cout; ++c) {
          const S bv = bias.data()[c];
          S* oc = ob + c * L;
          for (Index p = 0; p < L; ++p) oc[p] += bv;
        }
    }
  }
  return detail::make_result<S>(
      out_shape, std::move(out), meta, {&x, &weight, &bias}, [x, weight, bias, g, depthwise, L, ckv](Node<S>& self) {
        const bool want_x = detail::wants_grad(x), want_w = detail::wants_grad(weight);
        S* dx = want_x ? detail::grad_of(x).data() : nullptr;
        S* dw = want_w ? detail::grad_of(weight).data() : nullptr;
        Buffer<S> col, dcol;
        const bool direct = g.col_is_input();
        if (!depthwise && !direct) {
          col.resize(static_cast<std::size_t>(ckv * L));
          if (want_x) dcol.resize(col.size());
        }
        for (Index b = 0; b < g.batch; ++b) {
          const S* xb = x.data().data() + b * g.cin * g.in_spatial();
          const S* gb = self.grad.data() + b * g.cout * L;
          if (depthwise) {
            detail::depthwise_backward(xb, weight.data().data(), gb, g, dx ? dx + b * g.cin * g.in_spatial() : nullptr,
                                       dw);
            continue;
          }
          for (Index gr = 0; gr < g.groups; ++gr) {
            detail::CMapR<S> go(gb + gr * g.cout_g() * L, g.cout_g(), L);
            if (want_w) {
              const S* cp = xb + gr * g.cin_g() * g.in_spatial();
              if (!direct) {
                detail::im2col3d(xb, g, gr * g.cin_g(), col.data());
                cp = col.data();
              }
              detail::MapR<S>(dw + gr * g.cout_g() * ckv, g.cout_g(), ckv).noalias() +=
                  go * detail::CMapR<S>(cp, ckv, L).transpose();
            }
            if (want_x) {
              const auto wt = detail::CMapR<S>(weight.data().data() + gr * g.cout_g() * ckv, g.cout_g(), ckv).transpose();
              if (direct) {
                detail::MapR<S>(dx + b * g.cin * g.in_spatial() + gr * g.cin_g() * g.in_spatial(), ckv, L).noalias() +=
                    wt * go;
              } else {
                detail::MapR<S>(dcol.data(), ckv, L).noalias() = wt * go;
                detail::col2im3d(dcol.data(), g, gr * g.cin_g(), dx + b * g.cin * g.in_spatial());
              }
            }
          }
        }
        if (detail::wants_grad(bias)) {
          auto& gbias = detail::grad_of(bias);
          for (Index b = 0; b < g.batch; ++b)
            for (Index c = 0; c < g.cout; ++c) {
              const S* gc = self.grad.data() + (b * g.cout + c) * L;
              S acc = 0;
              for (Index p = 0; p < L; ++p) acc += gc[p];
              gbias[c] += acc;
            }
        }
      });
}

namespace detail {

// Two-tap linear interpolation table for one axis, half-pixel aligned with
// source coordinates clamped to the valid range.
struct InterpAxis {
  std::vector<Index> i0, i1;
  std::vector<double> w0, w1;
};

inline InterpAxis interp_axis(Index in, Index out) {
  InterpAxis a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.w0.resize(out);
  a.w1.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (Index i = 0; i < out; ++i) {
    if (in == out) {
      a.i0[i] = a.i1[i] = i;
      a.w0[i] = 1.0;
      a.w1[i] = 0.0;
      continue;
    }
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const Index lo = static_cast<Index>(std::floor(src));
    const Index hi = std::min<Index>(lo + 1, in - 1);
    const double frac = src - static_cast<double>(lo);
    a.i0[i] = lo;
    a.i1[i] = hi;
    a.w0[i] = 1.0 - frac;
    a.w1[i] = frac;
  }
  return a;
}

}  // namespace detail

// Trilinear resize of the last three axes of a (B, C, T, H, W) tensor.
template <class S>
Tensor<S> trilinear_resize(const Tensor<S>& x, Dims3 target) {
  if (x.ndim() != 5) throw ShapeError("trilinear_resize expects (B,C,T,H,W), got " + shape_str(x.shape()));
  for (Index d : target)
    if (d < 1) throw ShapeError("trilinear_resize target dims must be >= 1");
  const Index BC = x.dim(0) * x.dim(1);
  const Index T = x.dim(2), H = x.dim(3), W = x.dim(4);
  const Shape out_shape{x.dim(0), x.dim(1), target[0], target[1], target[2]};
  if (target[0] == T && target[1] == H && target[2] == W) return x;
  record_flops(FlopCategory::Other, static_cast<std::uint64_t>(numel_of(out_shape)) * OtherRates::interpolate);
  auto at = std::make_shared<detail::InterpAxis>(detail::interp_axis(T, target[0]));
  auto ah = std::make_shared<detail::InterpAxis>(detail::interp_axis(H, target[1]));
  auto aw = std::make_shared<detail::InterpAxis>(detail::interp_axis(W, target[2]));
  const Index T2 = target[0], H2 = target[1], W2 = target[2];
  Buffer<S> out;
  if (!x.is_meta()) {
    out.resize(static_cast<std::size_t>(numel_of(out_shape)));
    // separable passes W, H, T; the same lerps as the nested form, so
    // constants and unresized axes come through bit-exact
    std::vector<double> a(static_cast<std::size_t>(T * H * W2)), b(static_cast<std::size_t>(T * H2 * W2));
    auto lerp = [](double p, double q, double f) { return p + f * (q - p); };
    for (Index bc = 0; bc < BC; ++bc) {
      const S* src = x.data().data() + bc * T * H * W;
      S* dst = out.data() + bc * T2 * H2 * W2;
      for (Index r = 0; r < T * H; ++r)
        for (Index w = 0; w < W2; ++w)
          a[r * W2 + w] = lerp(src[r * W + aw->i0[w]], src[r * W + aw->i1[w]], aw->w1[w]);
      for (Index t = 0; t < T; ++t)
        for (Index h = 0; h < H2; ++h) {
          const double* r0 = a.data() + (t * H + ah->i0[h]) * W2;
          const double* r1 = a.data() + (t * H + ah->i1[h]) * W2;
          double* o = b.data() + (t * H2 + h) * W2;
          const double f = ah->w1[h];
          for (Index w = 0; w < W2; ++w) o[w] = lerp(r0[w], r1[w], f);
        }
      const Index plane = H2 * W2;
      for (Index t = 0; t < T2; ++t) {
        const double* p0 = b.data() + at->i0[t] * plane;
        const double* p1 = b.data() + at->i1[t] * plane;
        const double f = at->w1[t];
        S* o = dst + t * plane;
        for (Index i = 0; i < plane; ++i) o[i] = static_cast<S>(lerp(p0[i], p1[i], f));
      }
    }
  }
  return detail::make_result<S>(out_shape, std::move(out), x.is_meta(), {&x},
                                [x, at, ah, aw, BC, T, H, W, T2, H2, W2](Node<S>& self) {
                                  auto& g = detail::grad_of(x);
                                  const Index plane = H2 * W2;
                                  std::vector<double> gb(static_cast<std::size_t>(T * plane)),
                                      ga(static_cast<std::size_t>(T * H * W2));
                                  for (Index bc = 0; bc < BC; ++bc) {
                                    S* dsrc = g.data() + bc * T * H * W;
                                    const S* gout = self.grad.data() + bc * T2 * plane;
                                    std::fill(gb.begin(), gb.end(), 0.0);
                                    std::fill(ga.begin(), ga.end(), 0.0);
                                    for (Index t = 0; t < T2; ++t) {
                                      double* p0 = gb.data() + at->i0[t] * plane;
                                      double* p1 = gb.data() + at->i1[t] * plane;
                                      const double w0 = at->w0[t], w1 = at->w1[t];
                                      const S* go = gout + t * plane;
                                      for (Index i = 0; i < plane; ++i) {
                                        p0[i] += w0 * go[i];
                                        p1[i] += w1 * go[i];
                                      }
                                    }
                                    for (Index t = 0; t < T; ++t)
                                      for (Index h = 0; h < H2; ++h) {
                                        double* r0 = ga.data() + (t * H + ah->i0[h]) * W2;
                                        double* r1 = ga.data() + (t * H + ah->i1[h]) * W2;
                                        const double* go = gb.data() + (t * H2 + h) * W2;
                                        const double w0 = ah->w0[h], w1 = ah->w1[h];
                                        for (Index w = 0; w < W2; ++w) {
                                          r0[w] += w0 * go[w];
                                          r1[w] += w1 * go[w];
                                        }
                                      }
                                    for (Index r = 0; r < T * H; ++r)
                                      for (Index w = 0; w < W2; ++w) {
                                        const double go = ga[r * W2 + w];
                                        dsrc[r * W + aw->i0[w]] += static_cast<S>(aw->w0[w] * go);
                                        dsrc[r * W + aw->i1[w]] += static_cast<S>(aw->w1[w] * go);
                                      }
                                  }
                                });
}

}  // namespace vf
