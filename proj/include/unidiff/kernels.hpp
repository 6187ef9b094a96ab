#pragma once

// Forward and adjoint kernels for the small set of dense-prediction layers used
// by the model. Every output element is accumulated in a fixed order that does
// not depend on the batch size, so per-item results are bit-identical whether an
// image is processed alone or inside a batch.

#include <algorithm>
#include <cmath>
#include <vector>

#include "unidiff/tensor.hpp"

namespace unidiff::kernels {

struct ConvGeom {
  int n, ci, h, w, co, k, stride, pad, ho, wo;
};

template <class T>
ConvGeom conv_geom(const Tensor<T>& x, const Tensor<T>& w, int stride) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d expects rank-4 input and weight, got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  if (w.dim(1) != x.dim(1))
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  if (w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0) throw ShapeError("conv2d kernel must be square and odd");
  if (stride != 1 && stride != 2) throw ParameterError("conv2d stride must be 1 or 2");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, w.dim(2) / 2, 0, 0};
  g.ho = (g.h + 2 * g.pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / stride + 1;
  return g;
}

/// Zero-padded copy of all channels of item n: (ci, h + 2p, w + 2p).
template <class T>
void pad_item(const Tensor<T>& x, int n, int pad, std::vector<T>& buf) {
  const int c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int hp = h + 2 * pad, wp = w + 2 * pad;
  buf.assign(static_cast<std::size_t>(c) * hp * wp, T(0));
  for (int ci = 0; ci < c; ++ci) {
    const T* src = x.plane(n, ci);
    T* dst = buf.data() + static_cast<std::size_t>(ci) * hp * wp;
    for (int y = 0; y < h; ++y) std::copy(src + y * w, src + (y + 1) * w, dst + (y + pad) * wp + pad);
  }
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, int stride) {
  const ConvGeom g = conv_geom(x, w, stride);
  Tensor<T> out({g.n, g.co, g.ho, g.wo});
  const int hp = g.h + 2 * g.pad, wp = g.w + 2 * g.pad;
  const std::size_t pstride = static_cast<std::size_t>(hp) * wp;
  const int kk = g.k * g.k;
  std::vector<T> pin;
  for (int n = 0; n < g.n; ++n) {
    pad_item(x, n, g.pad, pin);
    for (int co = 0; co < g.co; ++co) {
      T* o = out.plane(n, co);
      std::fill(o, o + g.ho * g.wo, bias ? (*bias)[co] : T(0));
      for (int ci = 0; ci < g.ci; ++ci) {
        const T* wk = w.data() + (static_cast<std::size_t>(co) * g.ci + ci) * kk;
        const T* p = pin.data() + ci * pstride;
        if (g.k == 3 && g.stride == 1) {
          const T w0 = wk[0], w1 = wk[1], w2 = wk[2], w3 = wk[3], w4 = wk[4], w5 = wk[5], w6 = wk[6], w7 = wk[7],
                  w8 = wk[8];
          for (int y = 0; y < g.ho; ++y) {
            T* orow = o + y * g.wo;
            const T* r0 = p + y * wp;
            const T* r1 = r0 + wp;
            const T* r2 = r1 + wp;
            for (int xx = 0; xx < g.wo; ++xx) {
              orow[xx] += w0 * r0[xx] + w1 * r0[xx + 1] + w2 * r0[xx + 2] + w3 * r1[xx] + w4 * r1[xx + 1] +
                          w5 * r1[xx + 2] + w6 * r2[xx] + w7 * r2[xx + 1] + w8 * r2[xx + 2];
            }
          }
        } else {
          for (int y = 0; y < g.ho; ++y) {
            T* orow = o + y * g.wo;
            for (int ky = 0; ky < g.k; ++ky) {
              const T* r = p + (y * g.stride + ky) * wp;
              for (int kx = 0; kx < g.k; ++kx) {
                const T wv = wk[ky * g.k + kx];
                for (int xx = 0; xx < g.wo; ++xx) orow[xx] += wv * r[xx * g.stride + kx];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

/// Gradients of conv2d. Any of gx/gw/gb may be null.
template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, int stride, const Tensor<T>& gout, Tensor<T>* gx,
                     Tensor<T>* gw, Tensor<T>* gb) {
  const ConvGeom g = conv_geom(x, w, stride);
  const int hp = g.h + 2 * g.pad, wp = g.w + 2 * g.pad;
  const std::size_t pstride = static_cast<std::size_t>(hp) * wp;
  const int kk = g.k * g.k;

  if (gb) {
    for (int n = 0; n < g.n; ++n)
      for (int co = 0; co < g.co; ++co) {
        const T* go = gout.plane(n, co);
        T s = 0;
        for (int i = 0; i < g.ho * g.wo; ++i) s += go[i];
        (*gb)[co] += s;
      }
  }

  if (gw) {
    std::vector<T> pin, acc(static_cast<std::size_t>(kk) * g.wo);
    for (int n = 0; n < g.n; ++n) {
      pad_item(x, n, g.pad, pin);
      for (int co = 0; co < g.co; ++co) {
        const T* go = gout.plane(n, co);
        for (int ci = 0; ci < g.ci; ++ci) {
          const T* p = pin.data() + ci * pstride;
          std::fill(acc.begin(), acc.end(), T(0));
          for (int y = 0; y < g.ho; ++y) {
            const T* grow = go + y * g.wo;
            for (int ky = 0; ky < g.k; ++ky) {
              const T* r = p + (y * g.stride + ky) * wp;
              for (int kx = 0; kx < g.k; ++kx) {
                T* a = acc.data() + (ky * g.k + kx) * g.wo;
                for (int xx = 0; xx < g.wo; ++xx) a[xx] += grow[xx] * r[xx * g.stride + kx];
              }
            }
          }
          T* gwk = gw->data() + (static_cast<std::size_t>(co) * g.ci + ci) * kk;
          for (int k = 0; k < kk; ++k) {
            T s = 0;
            const T* a = acc.data() + k * g.wo;
            for (int xx = 0; xx < g.wo; ++xx) s += a[xx];
            gwk[k] += s;
          }
        }
      }
    }
  }

  if (gx) {
    if (g.stride == 1) {
      // Adjoint of a stride-1 "same" convolution is a convolution with the
      // spatially flipped, channel-transposed kernel.
      Tensor<T> wt({g.ci, g.co, g.k, g.k});
      for (int co = 0; co < g.co; ++co)
        for (int ci = 0; ci < g.ci; ++ci)
          for (int k = 0; k < kk; ++k)
            wt[(static_cast<std::size_t>(ci) * g.co + co) * kk + (kk - 1 - k)] =
                w[(static_cast<std::size_t>(co) * g.ci + ci) * kk + k];
      Tensor<T> d = conv2d(gout, wt, static_cast<const Tensor<T>*>(nullptr), 1);
      for (std::size_t i = 0; i < d.size(); ++i) (*gx)[i] += d[i];
    } else {
      std::vector<T> gp(static_cast<std::size_t>(g.ci) * pstride);
      for (int n = 0; n < g.n; ++n) {
        std::fill(gp.begin(), gp.end(), T(0));
        for (int co = 0; co < g.co; ++co) {
          const T* go = gout.plane(n, co);
          for (int ci = 0; ci < g.ci; ++ci) {
            const T* wk = w.data() + (static_cast<std::size_t>(co) * g.ci + ci) * kk;
            T* p = gp.data() + ci * pstride;
            for (int y = 0; y < g.ho; ++y)
              for (int ky = 0; ky < g.k; ++ky) {
                T* r = p + (y * g.stride + ky) * wp;
                for (int kx = 0; kx < g.k; ++kx) {
                  const T wv = wk[ky * g.k + kx];
                  for (int xx = 0; xx < g.wo; ++xx) r[xx * g.stride + kx] += wv * go[y * g.wo + xx];
                }
              }
          }
        }
        for (int ci = 0; ci < g.ci; ++ci) {
          T* dst = gx->plane(n, ci);
          const T* src = gp.data() + ci * pstride;
          for (int y = 0; y < g.h; ++y)
            for (int xx = 0; xx < g.w; ++xx) dst[y * g.w + xx] += src[(y + g.pad) * wp + xx + g.pad];
        }
      }
    }
  }
}

/// 2x2 stride-2 transposed convolution. Weight layout (ci, co, 2, 2).
template <class T>
Tensor<T> deconv2x2(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(0) != x.dim(1) || w.dim(2) != 2 || w.dim(3) != 2)
    throw ShapeError("deconv2x2 shape mismatch: " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  const int n_ = x.dim(0), ci_ = x.dim(1), h = x.dim(2), wd = x.dim(3), co_ = w.dim(1);
  Tensor<T> out({n_, co_, 2 * h, 2 * wd});
  for (int n = 0; n < n_; ++n)
    for (int co = 0; co < co_; ++co) {
      T* o = out.plane(n, co);
      std::fill(o, o + 4 * h * wd, bias ? (*bias)[co] : T(0));
      for (int ci = 0; ci < ci_; ++ci) {
        const T* wk = w.data() + (static_cast<std::size_t>(ci) * co_ + co) * 4;
        const T* xi = x.plane(n, ci);
        for (int y = 0; y < h; ++y)
          for (int a = 0; a < 2; ++a) {
            T* orow = o + (2 * y + a) * 2 * wd;
            const T w0 = wk[2 * a], w1 = wk[2 * a + 1];
            for (int xx = 0; xx < wd; ++xx) {
              orow[2 * xx] += w0 * xi[y * wd + xx];
              orow[2 * xx + 1] += w1 * xi[y * wd + xx];
            }
          }
      }
    }
  return out;
}

template <class T>
void deconv2x2_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gout, Tensor<T>* gx, Tensor<T>* gw,
                        Tensor<T>* gb) {
  const int n_ = x.dim(0), ci_ = x.dim(1), h = x.dim(2), wd = x.dim(3), co_ = w.dim(1);
  for (int n = 0; n < n_; ++n)
    for (int co = 0; co < co_; ++co) {
      const T* go = gout.plane(n, co);
      if (gb) {
        T s = 0;
        for (int i = 0; i < 4 * h * wd; ++i) s += go[i];
        (*gb)[co] += s;
      }
      for (int ci = 0; ci < ci_; ++ci) {
        const std::size_t wo = (static_cast<std::size_t>(ci) * co_ + co) * 4;
        const T* xi = x.plane(n, ci);
        T* gxi = gx ? gx->plane(n, ci) : nullptr;
        T s[4] = {0, 0, 0, 0};
        for (int y = 0; y < h; ++y)
          for (int a = 0; a < 2; ++a) {
            const T* grow = go + (2 * y + a) * 2 * wd;
            for (int xx = 0; xx < wd; ++xx) {
              const T xv = xi[y * wd + xx];
              s[2 * a] += xv * grow[2 * xx];
              s[2 * a + 1] += xv * grow[2 * xx + 1];
              if (gxi) gxi[y * wd + xx] += w[wo + 2 * a] * grow[2 * xx] + w[wo + 2 * a + 1] * grow[2 * xx + 1];
            }
          }
        if (gw)
          for (int k = 0; k < 4; ++k) (*gw)[wo + k] += s[k];
      }
    }
}

// Bilinear x2 upsampling with half-pixel centres and edge clamping,
// applied separably (rows, then columns).
template <class T>
void upsample_line(const T* in, int len, int step_in, T* out, int step_out) {
  for (int i = 0; i < len; ++i) {
    const T c = in[i * step_in];
    const T l = in[std::max(i - 1, 0) * step_in];
    const T r = in[std::min(i + 1, len - 1) * step_in];
    out[(2 * i) * step_out] = T(0.75) * c + T(0.25) * l;
    out[(2 * i + 1) * step_out] = T(0.75) * c + T(0.25) * r;
  }
}

template <class T>
void upsample_line_adjoint(const T* gout, int len, int step_out, T* gin, int step_in) {
  for (int i = 0; i < len; ++i) {
    const T a = gout[(2 * i) * step_out], b = gout[(2 * i + 1) * step_out];
    gin[i * step_in] += T(0.75) * a + T(0.75) * b;
    gin[std::max(i - 1, 0) * step_in] += T(0.25) * a;
    gin[std::min(i + 1, len - 1) * step_in] += T(0.25) * b;
  }
}

template <class T>
Tensor<T> upsample2(const Tensor<T>& x) {
  const int n_ = x.dim(0), c_ = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out({n_, c_, 2 * h, 2 * w});
  std::vector<T> tmp(static_cast<std::size_t>(h) * 2 * w);
  for (int n = 0; n < n_; ++n)
    for (int c = 0; c < c_; ++c) {
      const T* src = x.plane(n, c);
      for (int y = 0; y < h; ++y) upsample_line(src + y * w, w, 1, tmp.data() + y * 2 * w, 1);
      T* dst = out.plane(n, c);
      for (int xx = 0; xx < 2 * w; ++xx) upsample_line(tmp.data() + xx, h, 2 * w, dst + xx, 2 * w);
    }
  return out;
}

template <class T>
void upsample2_backward(const Tensor<T>& gout, Tensor<T>& gx) {
  const int n_ = gx.dim(0), c_ = gx.dim(1), h = gx.dim(2), w = gx.dim(3);
  std::vector<T> tmp(static_cast<std::size_t>(h) * 2 * w);
  for (int n = 0; n < n_; ++n)
    for (int c = 0; c < c_; ++c) {
      std::fill(tmp.begin(), tmp.end(), T(0));
      const T* g = gout.plane(n, c);
      for (int xx = 0; xx < 2 * w; ++xx) upsample_line_adjoint(g + xx, h, 2 * w, tmp.data() + xx, 2 * w);
      T* dst = gx.plane(n, c);
      for (int y = 0; y < h; ++y) upsample_line_adjoint(tmp.data() + y * 2 * w, w, 1, dst + y * w, 1);
    }
}

template <class T>
Tensor<T> avgpool2(const Tensor<T>& x) {
  const int n_ = x.dim(0), c_ = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ShapeError("avgpool2 needs even spatial size, got " + shape_str(x.shape()));
  Tensor<T> out({n_, c_, h / 2, w / 2});
  for (int n = 0; n < n_; ++n)
    for (int c = 0; c < c_; ++c) {
      const T* s = x.plane(n, c);
      T* d = out.plane(n, c);
      for (int y = 0; y < h / 2; ++y)
        for (int xx = 0; xx < w / 2; ++xx)
          d[y * (w / 2) + xx] = T(0.25) * (s[2 * y * w + 2 * xx] + s[2 * y * w + 2 * xx + 1] +
                                           s[(2 * y + 1) * w + 2 * xx] + s[(2 * y + 1) * w + 2 * xx + 1]);
    }
  return out;
}

template <class T>
void avgpool2_backward(const Tensor<T>& gout, Tensor<T>& gx) {
  const int n_ = gx.dim(0), c_ = gx.dim(1), h = gx.dim(2), w = gx.dim(3);
  for (int n = 0; n < n_; ++n)
    for (int c = 0; c < c_; ++c) {
      const T* g = gout.plane(n, c);
      T* d = gx.plane(n, c);
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) d[y * w + xx] += T(0.25) * g[(y / 2) * (w / 2) + xx / 2];
    }
}

/// x (n, in) times w (out, in)^T plus b.
template <class T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || w.dim(1) != x.dim(1) || b.size() != static_cast<std::size_t>(w.dim(0)))
    throw ShapeError("dense shape mismatch: " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  const int n_ = x.dim(0), in = x.dim(1), out_ = w.dim(0);
  Tensor<T> out({n_, out_});
  for (int n = 0; n < n_; ++n)
    for (int o = 0; o < out_; ++o) {
      T s = b[o];
      const T* wr = w.data() + static_cast<std::size_t>(o) * in;
      const T* xr = x.data() + static_cast<std::size_t>(n) * in;
      for (int i = 0; i < in; ++i) s += wr[i] * xr[i];
      out[static_cast<std::size_t>(n) * out_ + o] = s;
    }
  return out;
}

}  // namespace unidiff::kernels
