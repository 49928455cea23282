#pragma once

/// Neural operators: same-padded (dilated) convolution, adaptive atrous
/// convolution with learnable branch importances, bilinear sampling with
/// coordinate gradients, per-pixel adaptive dilated convolution driven by a
/// learned rate map, bilinear 2x upsampling, and the encoder/decoder blocks
/// composed from them.
///
/// Kernel taps use centered offsets {-1, 0, 1}^2 so a dilation rate scales a
/// symmetric neighborhood; out-of-bounds taps read zero.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <tuple>
#include <vector>

#include "cseg/tensor.hpp"

namespace cseg {

/// Learned per-pixel dilation rates are clamped to [0, kRateMax] with zero
/// gradient outside the interval.
constexpr double kRateMax = 8.0;

template <class T>
struct ConvKernel {
  Tensor<T> w;  // (c_out, c_in, kh, kw)
  Tensor<T> b;  // (1, c_out, 1, 1)
  int stride = 1;
  int dilation = 1;

  std::int64_t c_out() const { return w.shape().n; }
  std::int64_t c_in() const { return w.shape().c; }
  std::int64_t kh() const { return w.shape().h; }
  std::int64_t kw() const { return w.shape().w; }

  /// He fan-in initialization (std = sqrt(2 / (c_in*kh*kw))), zero bias.
  static ConvKernel he(std::int64_t c_out, std::int64_t c_in, std::int64_t kh,
                       std::int64_t kw, Rng& rng, int stride = 1, int dilation = 1) {
    ConvKernel k;
    double std_dev = std::sqrt(2.0 / double(c_in * kh * kw));
    k.w = Tensor<T>::randn(Shape{c_out, c_in, kh, kw}, rng, std_dev, true);
    k.b = Tensor<T>::zeros(Shape{1, c_out, 1, 1}, true);
    k.stride = stride;
    k.dilation = dilation;
    return k;
  }

  static ConvKernel zeros(std::int64_t c_out, std::int64_t c_in, std::int64_t kh,
                          std::int64_t kw, int stride = 1, int dilation = 1) {
    ConvKernel k;
    k.w = Tensor<T>::zeros(Shape{c_out, c_in, kh, kw}, true);
    k.b = Tensor<T>::zeros(Shape{1, c_out, 1, 1}, true);
    k.stride = stride;
    k.dilation = dilation;
    return k;
  }
};

namespace detail {

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

struct Pad {
  std::int64_t top = 0, left = 0, out_h = 0, out_w = 0;
};

/// TensorFlow-style SAME padding: out = ceil(in / stride), total padding
/// max(0, (out-1)*stride + (k-1)*dilation + 1 - in), split with the smaller
/// half leading.
inline Pad same_pad(std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw,
                    std::int64_t stride, std::int64_t dil) {
  Pad p;
  p.out_h = ceil_div(h, stride);
  p.out_w = ceil_div(w, stride);
  std::int64_t th = std::max<std::int64_t>(0, (p.out_h - 1) * stride + (kh - 1) * dil + 1 - h);
  std::int64_t tw = std::max<std::int64_t>(0, (p.out_w - 1) * stride + (kw - 1) * dil + 1 - w);
  p.top = th / 2;
  p.left = tw / 2;
  return p;
}

template <class T>
inline T dot_n(const T* __restrict a, const T* __restrict b, std::int64_t n) {
  T s = 0;
  for (std::int64_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

/// out[b,co] = sum_ci,ky,kx in[b,ci,oy*s-pt+ky*d, ox*s-pl+kx*d] * w + bias.
/// bias may be null (used by AAC branches, which add their bias once after
/// combining). The taps accumulate onto zero and the bias lands in a final
/// pass, so the AAC combine can reproduce the exact summation order.
template <class T>
void conv_forward(T* out, const T* in, const T* w, const T* bias, Shape xs,
                  std::int64_t c_out, std::int64_t kh, std::int64_t kw,
                  std::int64_t stride, std::int64_t dil) {
  const Pad p = same_pad(xs.h, xs.w, kh, kw, stride, dil);
  const std::int64_t OH = p.out_h, OW = p.out_w;
  const bool fast3 = stride == 1 && kh == 3 && kw == 3;  // pad == dil on both axes
  const bool fast1 = stride == 1 && kh == 1 && kw == 1;
  parallel_for(xs.n * c_out, 1, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t bc = lo; bc < hi; ++bc) {
      const std::int64_t b = bc / c_out, co = bc % c_out;
      const T* wk = w + co * xs.c * kh * kw;
      const T bv = bias ? bias[co] : T(0);
      const std::int64_t H = xs.h, W = xs.w;
      if (fast1) {
        for (std::int64_t oy = 0; oy < OH; ++oy) {
          T* __restrict orow = out + ((b * c_out + co) * OH + oy) * OW;
          for (std::int64_t ox = 0; ox < OW; ++ox) orow[ox] = T(0);
          std::int64_t ci = 0;
          for (; ci + 4 <= xs.c; ci += 4) {
            const T* __restrict i0 = in + ((b * xs.c + ci) * H + oy) * W;
            const T* __restrict i1 = i0 + H * W;
            const T* __restrict i2 = i1 + H * W;
            const T* __restrict i3 = i2 + H * W;
            const T w0 = wk[ci], w1 = wk[ci + 1], w2 = wk[ci + 2], w3 = wk[ci + 3];
            for (std::int64_t ox = 0; ox < OW; ++ox)
              orow[ox] += w0 * i0[ox] + w1 * i1[ox] + w2 * i2[ox] + w3 * i3[ox];
          }
          for (; ci < xs.c; ++ci) {
            const T* __restrict ir = in + ((b * xs.c + ci) * H + oy) * W;
            const T wv = wk[ci];
            for (std::int64_t ox = 0; ox < OW; ++ox) orow[ox] += wv * ir[ox];
          }
          if (bias)
            for (std::int64_t ox = 0; ox < OW; ++ox) orow[ox] += bv;
        }
        continue;
      }
      for (std::int64_t oy = 0; oy < OH; ++oy) {
        T* __restrict orow = out + ((b * c_out + co) * OH + oy) * OW;
        for (std::int64_t ox = 0; ox < OW; ++ox) orow[ox] = T(0);
        const bool interior_row = fast3 && oy >= dil && oy < H - dil;
        for (std::int64_t ci = 0; ci < xs.c; ++ci) {
          if (interior_row) {
            const T* base = in + ((b * xs.c + ci) * H) * W;
            const T* __restrict r0 = base + (oy - dil) * W;
            const T* __restrict r1 = base + oy * W;
            const T* __restrict r2 = base + (oy + dil) * W;
            const T* wrow = wk + ci * 9;
            const T w00 = wrow[0], w01 = wrow[1], w02 = wrow[2];
            const T w10 = wrow[3], w11 = wrow[4], w12 = wrow[5];
            const T w20 = wrow[6], w21 = wrow[7], w22 = wrow[8];
            const std::int64_t ilo = std::min(dil, W), ihi = std::max(ilo, W - dil);
            for (std::int64_t ox = ilo; ox < ihi; ++ox)
              orow[ox] += w00 * r0[ox - dil] + w01 * r0[ox] + w02 * r0[ox + dil] +
                          w10 * r1[ox - dil] + w11 * r1[ox] + w12 * r1[ox + dil] +
                          w20 * r2[ox - dil] + w21 * r2[ox] + w22 * r2[ox + dil];
            // edge columns, taps guarded individually
            const T* rows[3] = {r0, r1, r2};
            auto edge = [&](std::int64_t from, std::int64_t to) {
              for (std::int64_t ox = from; ox < to; ++ox) {
                T acc = T(0);
                for (int ky = 0; ky < 3; ++ky)
                  for (int kx = 0; kx < 3; ++kx) {
                    const std::int64_t ix = ox + (kx - 1) * dil;
                    if (ix >= 0 && ix < W) acc += wrow[ky * 3 + kx] * rows[ky][ix];
                  }
                orow[ox] += acc;
              }
            };
            edge(0, ilo);
            edge(ihi, W);
            continue;
          }
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            const std::int64_t iy = oy * stride - p.top + ky * dil;
            if (iy < 0 || iy >= H) continue;
            const T* irow = in + ((b * xs.c + ci) * H + iy) * W;
            const T* wrow = wk + (ci * kh + ky) * kw;
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const T wv = wrow[kx];
              const std::int64_t off = kx * dil - p.left;
              if (stride == 1) {
                const std::int64_t lo2 = std::max<std::int64_t>(0, -off);
                const std::int64_t hi2 = std::min(OW, W - off);
                const T* __restrict ir = irow + off;
                for (std::int64_t ox = lo2; ox < hi2; ++ox) orow[ox] += wv * ir[ox];
              } else {
                std::int64_t lo2 = off < 0 ? ceil_div(-off, stride) : 0;
                std::int64_t hi2 = off > W - 1 ? 0 : std::min(OW, (W - 1 - off) / stride + 1);
                for (std::int64_t ox = lo2; ox < hi2; ++ox)
                  orow[ox] += wv * irow[ox * stride + off];
              }
            }
          }
        }
        if (bias)
          for (std::int64_t ox = 0; ox < OW; ++ox) orow[ox] += bv;
      }
    }
  });
}

/// gin += scale * d(out)/d(in)^T applied to gout.
template <class T>
void conv_backward_input(T* gin, const T* gout, const T* w, Shape xs, std::int64_t c_out,
                         std::int64_t kh, std::int64_t kw, std::int64_t stride,
                         std::int64_t dil, T scale) {
  const Pad p = same_pad(xs.h, xs.w, kh, kw, stride, dil);
  const std::int64_t OH = p.out_h, OW = p.out_w;
  const std::int64_t H = xs.h, W = xs.w;
  if (stride == 1 && kh == 3 && kw == 3) {
    // gathered transpose: gin[iy,ix] reads gout rows iy+d, iy, iy-d with
    // column offsets +d, 0, -d; rows outside the image read a zero row
    parallel_for(xs.n * xs.c, 1, [&](std::int64_t lo, std::int64_t hi) {
      std::vector<T> zero_row(std::size_t(W), T(0));
      for (std::int64_t bci = lo; bci < hi; ++bci) {
        const std::int64_t b = bci / xs.c, ci = bci % xs.c;
        for (std::int64_t iy = 0; iy < H; ++iy) {
          T* __restrict dst = gin + ((b * xs.c + ci) * H + iy) * W;
          for (std::int64_t co = 0; co < c_out; ++co) {
            const T* wk = w + (co * xs.c + ci) * 9;
            const T w00 = scale * wk[0], w01 = scale * wk[1], w02 = scale * wk[2];
            const T w10 = scale * wk[3], w11 = scale * wk[4], w12 = scale * wk[5];
            const T w20 = scale * wk[6], w21 = scale * wk[7], w22 = scale * wk[8];
            const T* gbase = gout + (b * c_out + co) * H * W;
            const T* __restrict g0 = iy + dil < H ? gbase + (iy + dil) * W : zero_row.data();
            const T* __restrict g1 = gbase + iy * W;
            const T* __restrict g2 = iy - dil >= 0 ? gbase + (iy - dil) * W : zero_row.data();
            const std::int64_t ilo = std::min(dil, W), ihi = std::max(ilo, W - dil);
            for (std::int64_t ix = ilo; ix < ihi; ++ix)
              dst[ix] += w00 * g0[ix + dil] + w01 * g0[ix] + w02 * g0[ix - dil] +
                         w10 * g1[ix + dil] + w11 * g1[ix] + w12 * g1[ix - dil] +
                         w20 * g2[ix + dil] + w21 * g2[ix] + w22 * g2[ix - dil];
            const T* grows[3] = {g0, g1, g2};
            const T wrows[3][3] = {{w00, w01, w02}, {w10, w11, w12}, {w20, w21, w22}};
            auto edge = [&](std::int64_t from, std::int64_t to) {
              for (std::int64_t ix = from; ix < to; ++ix) {
                T acc = T(0);
                for (int ky = 0; ky < 3; ++ky)
                  for (int kx = 0; kx < 3; ++kx) {
                    const std::int64_t ox = ix - (kx - 1) * dil;
                    if (ox >= 0 && ox < W) acc += wrows[ky][kx] * grows[ky][ox];
                  }
                dst[ix] += acc;
              }
            };
            edge(0, ilo);
            edge(ihi, W);
          }
        }
      }
    });
    return;
  }
  parallel_for(xs.n * xs.c, 1, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t bci = lo; bci < hi; ++bci) {
      const std::int64_t b = bci / xs.c, ci = bci % xs.c;
      for (std::int64_t co = 0; co < c_out; ++co) {
        const T* wk = w + (co * xs.c + ci) * kh * kw;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          for (std::int64_t oy = 0; oy < OH; ++oy) {
            const std::int64_t iy = oy * stride - p.top + ky * dil;
            if (iy < 0 || iy >= xs.h) continue;
            const T* grow = gout + ((b * c_out + co) * OH + oy) * OW;
            T* irow = gin + ((b * xs.c + ci) * xs.h + iy) * xs.w;
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const T wv = scale * wk[ky * kw + kx];
              const std::int64_t off = kx * dil - p.left;
              if (stride == 1) {
                const std::int64_t lo2 = std::max<std::int64_t>(0, -off);
                const std::int64_t hi2 = std::min(OW, xs.w - off);
                T* __restrict ir = irow + off;
                for (std::int64_t ox = lo2; ox < hi2; ++ox) ir[ox] += wv * grow[ox];
              } else {
                std::int64_t lo2 = off < 0 ? ceil_div(-off, stride) : 0;
                std::int64_t hi2 = off > xs.w - 1 ? 0 : std::min(OW, (xs.w - 1 - off) / stride + 1);
                for (std::int64_t ox = lo2; ox < hi2; ++ox)
                  irow[ox * stride + off] += wv * grow[ox];
              }
            }
          }
        }
      }
    }
  });
}

/// gw += scale * dL/dw, gb += scale * dL/db (gb may be null).
template <class T>
void conv_backward_weight(T* gw, T* gb, const T* in, const T* gout, Shape xs,
                          std::int64_t c_out, std::int64_t kh, std::int64_t kw,
                          std::int64_t stride, std::int64_t dil, T scale) {
  const Pad p = same_pad(xs.h, xs.w, kh, kw, stride, dil);
  const std::int64_t OH = p.out_h, OW = p.out_w;
  const std::int64_t H = xs.h, W = xs.w;
  if (stride == 1 && kh == 3 && kw == 3) {
    parallel_for(c_out, 1, [&](std::int64_t lo, std::int64_t hi) {
      std::vector<T> zero_row(std::size_t(W), T(0));
      for (std::int64_t co = lo; co < hi; ++co) {
        if (gb) {
          T bacc = T(0);
          for (std::int64_t b = 0; b < xs.n; ++b) {
            const T* g = gout + (b * c_out + co) * H * W;
            for (std::int64_t i = 0; i < H * W; ++i) bacc += g[i];
          }
          gb[co] += scale * bacc;
        }
        for (std::int64_t ci = 0; ci < xs.c; ++ci) {
          T acc[9] = {};
          for (std::int64_t b = 0; b < xs.n; ++b) {
            const T* gbase = gout + (b * c_out + co) * H * W;
            const T* ibase = in + (b * xs.c + ci) * H * W;
            for (std::int64_t oy = 0; oy < H; ++oy) {
              const T* __restrict grow = gbase + oy * W;
              const T* __restrict r0 = oy - dil >= 0 ? ibase + (oy - dil) * W : zero_row.data();
              const T* __restrict r1 = ibase + oy * W;
              const T* __restrict r2 = oy + dil < H ? ibase + (oy + dil) * W : zero_row.data();
              const std::int64_t ilo = std::min(dil, W), ihi = std::max(ilo, W - dil);
              T a00 = 0, a01 = 0, a02 = 0, a10 = 0, a11 = 0, a12 = 0, a20 = 0, a21 = 0, a22 = 0;
              for (std::int64_t ox = ilo; ox < ihi; ++ox) {
                const T g = grow[ox];
                a00 += g * r0[ox - dil];
                a01 += g * r0[ox];
                a02 += g * r0[ox + dil];
                a10 += g * r1[ox - dil];
                a11 += g * r1[ox];
                a12 += g * r1[ox + dil];
                a20 += g * r2[ox - dil];
                a21 += g * r2[ox];
                a22 += g * r2[ox + dil];
              }
              const T* rows[3] = {r0, r1, r2};
              T* accs[3][3] = {{&a00, &a01, &a02}, {&a10, &a11, &a12}, {&a20, &a21, &a22}};
              auto edge = [&](std::int64_t from, std::int64_t to) {
                for (std::int64_t ox = from; ox < to; ++ox) {
                  const T g = grow[ox];
                  for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                      const std::int64_t ix = ox + (kx - 1) * dil;
                      if (ix >= 0 && ix < W) *accs[ky][kx] += g * rows[ky][ix];
                    }
                }
              };
              edge(0, ilo);
              edge(ihi, W);
              acc[0] += a00; acc[1] += a01; acc[2] += a02;
              acc[3] += a10; acc[4] += a11; acc[5] += a12;
              acc[6] += a20; acc[7] += a21; acc[8] += a22;
            }
          }
          T* dst = gw + (co * xs.c + ci) * 9;
          for (int k = 0; k < 9; ++k) dst[k] += scale * acc[k];
        }
      }
    });
    return;
  }
  parallel_for(c_out, 1, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t co = lo; co < hi; ++co) {
      T bacc = T(0);
      for (std::int64_t b = 0; b < xs.n; ++b) {
        const T* gbase = gout + (b * c_out + co) * OH * OW;
        if (gb)
          for (std::int64_t i = 0; i < OH * OW; ++i) bacc += gbase[i];
        for (std::int64_t ci = 0; ci < xs.c; ++ci) {
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const std::int64_t off = kx * dil - p.left;
              T acc0 = 0, acc1 = 0;
              for (std::int64_t oy = 0; oy < OH; ++oy) {
                const std::int64_t iy = oy * stride - p.top + ky * dil;
                if (iy < 0 || iy >= xs.h) continue;
                const T* grow = gbase + oy * OW;
                const T* irow = in + ((b * xs.c + ci) * xs.h + iy) * xs.w;
                if (stride == 1) {
                  const std::int64_t lo2 = std::max<std::int64_t>(0, -off);
                  const std::int64_t hi2 = std::min(OW, xs.w - off);
                  acc0 += dot_n(grow + lo2, irow + off + lo2, hi2 - lo2);
                } else {
                  std::int64_t lo2 = off < 0 ? ceil_div(-off, stride) : 0;
                  std::int64_t hi2 = off > xs.w - 1 ? 0 : std::min(OW, (xs.w - 1 - off) / stride + 1);
                  for (std::int64_t ox = lo2; ox < hi2; ++ox)
                    acc1 += grow[ox] * irow[ox * stride + off];
                }
              }
              gw[((co * xs.c + ci) * kh + ky) * kw + kx] += scale * (acc0 + acc1);
            }
          }
        }
      }
      if (gb) gb[co] += scale * bacc;
    }
  });
}

}  // namespace detail

/// Same-padded cross-correlation with dilation; differentiable w.r.t. input,
/// weights and bias.
template <class T>
Tensor<T> conv2d(Graph<T>* g, const Tensor<T>& x, const ConvKernel<T>& k) {
  Shape xs = x.shape();
  require(xs.c == k.c_in(), "conv2d: input channels " + std::to_string(xs.c) +
                                " != kernel c_in " + std::to_string(k.c_in()));
  const detail::Pad p = detail::same_pad(xs.h, xs.w, k.kh(), k.kw(), k.stride, k.dilation);
  Shape os{xs.n, k.c_out(), p.out_h, p.out_w};
  bool rg = x.requires_grad() || k.w.requires_grad() || k.b.requires_grad();
  Tensor<T> out = detail::make_output(g, os, rg);
  detail::conv_forward(out.data(), x.data(), k.w.data(), k.b.data(), xs, k.c_out(),
                       k.kh(), k.kw(), k.stride, k.dilation);
  ensure_finite(out, "conv2d");
  if (g && out.requires_grad()) {
    Tensor<T> xc = x, wc = k.w, bc = k.b, oc = out;
    int stride = k.stride, dil = k.dilation;
    g->record(out, [xc, wc, bc, oc, xs, stride, dil]() mutable {
      const Shape ws = wc.shape();
      if (xc.requires_grad())
        detail::conv_backward_input(xc.grad(), oc.grad(), wc.data(), xs, ws.n, ws.h,
                                    ws.w, stride, dil, T(1));
      if (wc.requires_grad() || bc.requires_grad())
        detail::conv_backward_weight(wc.requires_grad() ? wc.grad() : nullptr,
                                     bc.requires_grad() ? bc.grad() : nullptr,
                                     xc.data(), oc.grad(), xs, ws.n, ws.h, ws.w,
                                     stride, dil, T(1));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adaptive atrous convolution
// ---------------------------------------------------------------------------

/// One shared kernel applied at fixed dilation rates r_k = k (k = 1..K),
/// branch outputs combined with learnable importance scores gamma_k; bias is
/// added once, outside the weighted sum.
template <class T>
struct AacParams {
  ConvKernel<T> kernel;  // stride 1; dilation field unused (branches set it)
  Tensor<T> gamma;       // (1, 1, 1, K)

  std::int64_t branches() const { return gamma.shape().w; }

  /// gamma initialized to 1/K each.
  static AacParams init(std::int64_t channels, Rng& rng, std::int64_t k_branches = 3) {
    AacParams p;
    p.kernel = ConvKernel<T>::he(channels, channels, 3, 3, rng);
    p.gamma = Tensor<T>::full(Shape{1, 1, 1, k_branches}, T(1) / T(k_branches), true);
    return p;
  }
};

template <class T>
Tensor<T> aac_forward(Graph<T>* g, const Tensor<T>& x, const AacParams<T>& p) {
  Shape xs = x.shape();
  require(xs.c == p.kernel.c_in(), "aac_forward: channel mismatch");
  const std::int64_t K = p.branches();
  const std::int64_t co = p.kernel.c_out();
  Shape os{xs.n, co, xs.h, xs.w};

  std::vector<Tensor<T>> branch(K);
  for (std::int64_t k = 0; k < K; ++k) {
    branch[k] = Tensor<T>::zeros(os);
    detail::conv_forward(branch[k].data(), x.data(), p.kernel.w.data(),
                         static_cast<const T*>(nullptr), xs, co, p.kernel.kh(),
                         p.kernel.kw(), 1, k + 1);
  }

  bool rg = x.requires_grad() || p.kernel.w.requires_grad() ||
            p.kernel.b.requires_grad() || p.gamma.requires_grad();
  Tensor<T> out = detail::make_output(g, os, rg);
  {
    const T* gam = p.gamma.data();
    const T* bias = p.kernel.b.data();
    T* po = out.data();
    const std::int64_t plane = os.h * os.w;
    for (std::int64_t b = 0; b < os.n; ++b) {
      for (std::int64_t c = 0; c < co; ++c) {
        T* dst = po + (b * co + c) * plane;
        bool first = true;
        for (std::int64_t k = 0; k < K; ++k) {
          if (gam[k] == T(0)) continue;  // exact-zero branches contribute nothing
          const T* src = branch[k].data() + (b * co + c) * plane;
          const T gv = gam[k];
          if (first) {
            for (std::int64_t i = 0; i < plane; ++i) dst[i] = gv * src[i];
            first = false;
          } else {
            for (std::int64_t i = 0; i < plane; ++i) dst[i] += gv * src[i];
          }
        }
        if (first)
          for (std::int64_t i = 0; i < plane; ++i) dst[i] = T(0);
        const T bv = bias[c];
        for (std::int64_t i = 0; i < plane; ++i) dst[i] += bv;
      }
    }
  }
  ensure_finite(out, "aac_forward");

  if (g && out.requires_grad()) {
    Tensor<T> xc = x, wc = p.kernel.w, bc = p.kernel.b, gc = p.gamma, oc = out;
    g->record(out, [xc, wc, bc, gc, oc, branch, xs, os, K]() mutable {
      const T* go = oc.grad();
      const T* gam = gc.data();
      const Shape ws = wc.shape();
      if (gc.requires_grad()) {
        T* gg = gc.grad();
        for (std::int64_t k = 0; k < K; ++k)
          gg[k] += detail::dot_n(go, branch[k].data(), os.numel());
      }
      for (std::int64_t k = 0; k < K; ++k) {
        if (gam[k] == T(0)) continue;
        if (xc.requires_grad())
          detail::conv_backward_input(xc.grad(), go, wc.data(), xs, ws.n, ws.h, ws.w,
                                      1, k + 1, gam[k]);
        if (wc.requires_grad())
          detail::conv_backward_weight(wc.grad(), static_cast<T*>(nullptr), xc.data(),
                                       go, xs, ws.n, ws.h, ws.w, 1, k + 1, gam[k]);
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad();
        const std::int64_t plane = os.h * os.w;
        for (std::int64_t b = 0; b < os.n; ++b)
          for (std::int64_t c = 0; c < os.c; ++c) {
            const T* src = go + (b * os.c + c) * plane;
            T acc = T(0);
            for (std::int64_t i = 0; i < plane; ++i) acc += src[i];
            gb[c] += acc;
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear sampling
// ---------------------------------------------------------------------------

namespace detail {

/// Zero padding beyond the grid; contributions fade linearly to zero across
/// the one-pixel border band, so the value is continuous everywhere.
template <class T>
struct BilinearTap {
  std::int64_t i00 = 0, i01 = 0, i10 = 0, i11 = 0;  // flat offsets into a plane
  T w00 = 0, w01 = 0, w10 = 0, w11 = 0;             // zero where the corner is invalid
  T ly = 0, lx = 0;
  bool v00 = false, v01 = false, v10 = false, v11 = false;

  static BilinearTap make(T y, T x, std::int64_t H, std::int64_t W) {
    BilinearTap t;
    if (y <= T(-1) || y >= T(H) || x <= T(-1) || x >= T(W)) return t;  // all weights zero
    const std::int64_t y0 = std::int64_t(std::floor(double(y)));
    const std::int64_t x0 = std::int64_t(std::floor(double(x)));
    const std::int64_t y1 = y0 + 1, x1 = x0 + 1;
    t.ly = y - T(y0);
    t.lx = x - T(x0);
    const T hy = T(1) - t.ly, hx = T(1) - t.lx;
    t.v00 = y0 >= 0 && x0 >= 0;
    t.v01 = y0 >= 0 && x1 < W;
    t.v10 = y1 < H && x0 >= 0;
    t.v11 = y1 < H && x1 < W;
    if (t.v00) { t.i00 = y0 * W + x0; t.w00 = hy * hx; }
    if (t.v01) { t.i01 = y0 * W + x1; t.w01 = hy * t.lx; }
    if (t.v10) { t.i10 = y1 * W + x0; t.w10 = t.ly * hx; }
    if (t.v11) { t.i11 = y1 * W + x1; t.w11 = t.ly * t.lx; }
    return t;
  }

  T value(const T* plane) const {
    T v = T(0);
    if (v00) v += w00 * plane[i00];
    if (v01) v += w01 * plane[i01];
    if (v10) v += w10 * plane[i10];
    if (v11) v += w11 * plane[i11];
    return v;
  }

  /// d(value)/dy and d(value)/dx at this sample point.
  void coord_grad(const T* plane, T& dy, T& dx) const {
    const T p00 = v00 ? plane[i00] : T(0);
    const T p01 = v01 ? plane[i01] : T(0);
    const T p10 = v10 ? plane[i10] : T(0);
    const T p11 = v11 ? plane[i11] : T(0);
    const T hy = T(1) - ly, hx = T(1) - lx;
    if (!v00 && !v01 && !v10 && !v11) { dy = dx = T(0); return; }
    dy = hx * (p10 - p00) + lx * (p11 - p01);
    dx = hy * (p01 - p00) + ly * (p11 - p10);
  }

  void scatter(T* gplane, T gv) const {
    if (v00) gplane[i00] += gv * w00;
    if (v01) gplane[i01] += gv * w01;
    if (v10) gplane[i10] += gv * w10;
    if (v11) gplane[i11] += gv * w11;
  }
};

}  // namespace detail

/// Value of one feature plane at real coordinates (y = row, x = column).
template <class T>
T bilinear_value(const Tensor<T>& feature, std::int64_t batch, std::int64_t channel,
                 T y, T x) {
  Shape s = feature.shape();
  const T* plane = feature.data() + (batch * s.c + channel) * s.h * s.w;
  return detail::BilinearTap<T>::make(y, x, s.h, s.w).value(plane);
}

/// Differentiable sample of feature[batch, channel] at (y, x), where y and x
/// are 1-element tensors. Gradients flow into the four surrounding grid
/// values and into the coordinates; x is the column axis, y the row axis.
template <class T>
Tensor<T> bilinear_sample(Graph<T>* g, const Tensor<T>& feature, const Tensor<T>& ycoord,
                          const Tensor<T>& xcoord, std::int64_t batch, std::int64_t channel) {
  require(ycoord.numel() == 1 && xcoord.numel() == 1,
          "bilinear_sample: coordinates must be 1-element tensors");
  Shape s = feature.shape();
  bool rg = feature.requires_grad() || ycoord.requires_grad() || xcoord.requires_grad();
  Tensor<T> out = detail::make_output(g, Shape{1, 1, 1, 1}, rg);
  const T y = ycoord.data()[0], x = xcoord.data()[0];
  const std::int64_t plane_off = (batch * s.c + channel) * s.h * s.w;
  auto tap = detail::BilinearTap<T>::make(y, x, s.h, s.w);
  out.data()[0] = tap.value(feature.data() + plane_off);
  ensure_finite(out, "bilinear_sample");
  if (g && out.requires_grad()) {
    Tensor<T> fc = feature, yc = ycoord, xc2 = xcoord, oc = out;
    g->record(out, [fc, yc, xc2, oc, s, batch, channel, plane_off]() mutable {
      const T gv = oc.grad()[0];
      const T yv = yc.data()[0], xv = xc2.data()[0];
      auto tap = detail::BilinearTap<T>::make(yv, xv, s.h, s.w);
      if (fc.requires_grad()) tap.scatter(fc.grad() + plane_off, gv);
      if (yc.requires_grad() || xc2.requires_grad()) {
        T dy, dx;
        tap.coord_grad(fc.data() + plane_off, dy, dx);
        if (yc.requires_grad()) yc.grad()[0] += gv * dy;
        if (xc2.requires_grad()) xc2.grad()[0] += gv * dx;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adaptive dilated convolution (per-pixel learned rates)
// ---------------------------------------------------------------------------

/// out[i,j] = sum_{ci} sum_{m,n in {-1,0,1}} sample(x0, i + r[i,j]*m,
/// j + r[i,j]*n) * w[co,ci,m,n] + bias. The rate map is clamped to
/// [0, kRateMax] before use (zero gradient where the clamp engages);
/// gradients flow to x0, the kernel, and the rate map through the bilinear
/// sample coordinates.
template <class T>
Tensor<T> adaptive_dilated_conv(Graph<T>* g, const Tensor<T>& x0, const Tensor<T>& rate_map,
                                const ConvKernel<T>& k) {
  Shape xs = x0.shape();
  Shape rs = rate_map.shape();
  require(rs.n == xs.n && rs.c == 1 && rs.h == xs.h && rs.w == xs.w,
          "adaptive_dilated_conv: rate map shape " + rs.str() +
              " does not match input " + xs.str());
  require(k.c_in() == xs.c && k.kh() == 3 && k.kw() == 3,
          "adaptive_dilated_conv: kernel must be 3x3 over input channels");
  const std::int64_t Ci = xs.c, Co = k.c_out(), H = xs.h, W = xs.w;
  Shape os{xs.n, Co, H, W};
  bool rg = x0.requires_grad() || rate_map.requires_grad() || k.w.requires_grad() ||
            k.b.requires_grad();
  Tensor<T> out = detail::make_output(g, os, rg);

  const std::int64_t taps = 9;
  const std::int64_t chan_stride = H * W;
  auto run_forward = [&](T* dst) {
    parallel_for(xs.n * H, 4, [&](std::int64_t lo, std::int64_t hi) {
      std::vector<T> sampled(std::size_t(Ci * taps));
      std::array<detail::BilinearTap<T>, 9> tap;
      for (std::int64_t bi = lo; bi < hi; ++bi) {
        const std::int64_t b = bi / H, i = bi % H;
        const T* rrow = rate_map.data() + (b * H + i) * W;
        const T* x0base = x0.data() + b * Ci * chan_stride;
        for (std::int64_t j = 0; j < W; ++j) {
          T r = rrow[j];
          r = r < T(0) ? T(0) : (r > T(kRateMax) ? T(kRateMax) : r);
          for (int m = -1; m <= 1; ++m)
            for (int n = -1; n <= 1; ++n)
              tap[std::size_t((m + 1) * 3 + (n + 1))] =
                  detail::BilinearTap<T>::make(T(i) + r * T(m), T(j) + r * T(n), H, W);
          for (std::int64_t ci = 0; ci < Ci; ++ci) {
            const T* plane = x0base + ci * chan_stride;
            T* srow = sampled.data() + ci * taps;
            for (std::int64_t t = 0; t < taps; ++t) srow[t] = tap[std::size_t(t)].value(plane);
          }
          const T* bias = k.b.data();
          for (std::int64_t co = 0; co < Co; ++co) {
            const T* wk = k.w.data() + co * Ci * taps;
            dst[((b * Co + co) * H + i) * W + j] =
                detail::dot_n(sampled.data(), wk, Ci * taps) + bias[co];
          }
        }
      }
    });
  };
  run_forward(out.data());
  ensure_finite(out, "adaptive_dilated_conv");

  if (g && out.requires_grad()) {
    Tensor<T> xc = x0, rc = rate_map, wc = k.w, bc = k.b, oc = out;
    g->record(out, [xc, rc, wc, bc, oc, xs, Ci, Co, H, W]() mutable {
      const std::int64_t taps = 9;
      const std::int64_t chan_stride = H * W;
      const T* go = oc.grad();
      std::vector<T> gvals(std::size_t(Ci * taps));
      std::vector<T> sampled(std::size_t(Ci * taps));
      std::array<detail::BilinearTap<T>, 9> tap;
      const bool need_x = xc.requires_grad();
      const bool need_r = rc.requires_grad();
      const bool need_w = wc.requires_grad();
      const bool need_b = bc.requires_grad();
      for (std::int64_t b = 0; b < xs.n; ++b) {
        const T* x0base = xc.data() + b * Ci * chan_stride;
        T* gxbase = need_x ? xc.grad() + b * Ci * chan_stride : nullptr;
        for (std::int64_t i = 0; i < H; ++i) {
          const T* rrow = rc.data() + (b * H + i) * W;
          for (std::int64_t j = 0; j < W; ++j) {
            const T r_raw = rrow[j];
            T r = r_raw < T(0) ? T(0) : (r_raw > T(kRateMax) ? T(kRateMax) : r_raw);
            for (int m = -1; m <= 1; ++m)
              for (int n = -1; n <= 1; ++n)
                tap[std::size_t((m + 1) * 3 + (n + 1))] =
                    detail::BilinearTap<T>::make(T(i) + r * T(m), T(j) + r * T(n), H, W);
            // upstream gradient into each sampled value
            std::fill(gvals.begin(), gvals.end(), T(0));
            for (std::int64_t co = 0; co < Co; ++co) {
              const T gv = go[((b * Co + co) * H + i) * W + j];
              if (need_b) bc.grad()[co] += gv;
              if (gv == T(0)) continue;
              const T* wk = wc.data() + co * Ci * taps;
              for (std::int64_t u = 0; u < Ci * taps; ++u) gvals[u] += gv * wk[u];
            }
            if (need_w) {
              for (std::int64_t ci = 0; ci < Ci; ++ci) {
                const T* plane = x0base + ci * chan_stride;
                T* srow = sampled.data() + ci * taps;
                for (std::int64_t t = 0; t < taps; ++t)
                  srow[t] = tap[std::size_t(t)].value(plane);
              }
              for (std::int64_t co = 0; co < Co; ++co) {
                const T gv = go[((b * Co + co) * H + i) * W + j];
                if (gv == T(0)) continue;
                T* gwk = wc.grad() + co * Ci * taps;
                for (std::int64_t u = 0; u < Ci * taps; ++u) gwk[u] += gv * sampled[u];
              }
            }
            if (need_x) {
              for (std::int64_t ci = 0; ci < Ci; ++ci) {
                T* gplane = gxbase + ci * chan_stride;
                const T* grow = gvals.data() + ci * taps;
                for (std::int64_t t = 0; t < taps; ++t)
                  if (grow[t] != T(0)) tap[std::size_t(t)].scatter(gplane, grow[t]);
              }
            }
            if (need_r && r_raw > T(0) && r_raw < T(kRateMax)) {
              T gr = T(0);
              for (std::int64_t ci = 0; ci < Ci; ++ci) {
                const T* plane = x0base + ci * chan_stride;
                const T* grow = gvals.data() + ci * taps;
                for (int m = -1; m <= 1; ++m)
                  for (int n = -1; n <= 1; ++n) {
                    const std::int64_t t = (m + 1) * 3 + (n + 1);
                    if (grow[t] == T(0) || (m == 0 && n == 0)) continue;
                    T dy, dx;
                    tap[std::size_t(t)].coord_grad(plane, dy, dx);
                    gr += grow[t] * (dy * T(m) + dx * T(n));
                  }
              }
              rc.grad()[(b * H + i) * W + j] += gr;
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear 2x upsampling
// ---------------------------------------------------------------------------

/// Bilinear x2 with the align-corners=false convention: output pixel o reads
/// source coordinate (o + 0.5)/2 - 0.5, clamped to the grid (border
/// replication), so constant images stay constant.
template <class T>
Tensor<T> upsample2x(Graph<T>* g, const Tensor<T>& x) {
  Shape xs = x.shape();
  Shape os{xs.n, xs.c, xs.h * 2, xs.w * 2};
  Tensor<T> out = detail::make_output(g, os, x.requires_grad());

  auto src_of = [](std::int64_t o, std::int64_t size) {
    double s = (double(o) + 0.5) / 2.0 - 0.5;
    if (s < 0) s = 0;
    if (s > double(size - 1)) s = double(size - 1);
    std::int64_t lo = std::int64_t(s);
    if (lo > size - 1) lo = size - 1;
    std::int64_t hi = std::min(lo + 1, size - 1);
    return std::tuple<std::int64_t, std::int64_t, double>(lo, hi, s - double(lo));
  };

  parallel_for(xs.n * xs.c, 1, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t bc = lo; bc < hi; ++bc) {
      const T* plane = x.data() + bc * xs.h * xs.w;
      T* oplane = out.data() + bc * os.h * os.w;
      for (std::int64_t oy = 0; oy < os.h; ++oy) {
        auto [y0, y1, ly] = src_of(oy, xs.h);
        for (std::int64_t ox = 0; ox < os.w; ++ox) {
          auto [x0, x1, lx] = src_of(ox, xs.w);
          const double v = (1 - ly) * ((1 - lx) * double(plane[y0 * xs.w + x0]) +
                                       lx * double(plane[y0 * xs.w + x1])) +
                           ly * ((1 - lx) * double(plane[y1 * xs.w + x0]) +
                                 lx * double(plane[y1 * xs.w + x1]));
          oplane[oy * os.w + ox] = T(v);
        }
      }
    }
  });
  ensure_finite(out, "upsample2x");

  if (g && out.requires_grad()) {
    Tensor<T> xc = x, oc = out;
    g->record(out, [xc, oc, xs, os, src_of]() mutable {
      parallel_for(xs.n * xs.c, 1, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t bc = lo; bc < hi; ++bc) {
          T* gplane = xc.grad() + bc * xs.h * xs.w;
          const T* goplane = oc.grad() + bc * os.h * os.w;
          for (std::int64_t oy = 0; oy < os.h; ++oy) {
            auto [y0, y1, ly] = src_of(oy, xs.h);
            for (std::int64_t ox = 0; ox < os.w; ++ox) {
              auto [x0, x1, lx] = src_of(ox, xs.w);
              const T gv = goplane[oy * os.w + ox];
              gplane[y0 * xs.w + x0] += gv * T((1 - ly) * (1 - lx));
              gplane[y0 * xs.w + x1] += gv * T((1 - ly) * lx);
              gplane[y1 * xs.w + x0] += gv * T(ly * (1 - lx));
              gplane[y1 * xs.w + x1] += gv * T(ly * lx);
            }
          }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Knowledge aggregation module
// ---------------------------------------------------------------------------

/// Decoder block: deep features x1 (N, c, h, w) are upsampled and projected to
/// o1 (N, c/2, 2h, 2w); a 3x3 rate learning layer maps o1 to a one-channel
/// dilated-rate map; shallow features x0 (N, c/2, 2h, 2w) are convolved with
/// per-pixel rates; the two halves are concatenated and fused back to c/2
/// channels.
template <class T>
struct KamParams {
  ConvKernel<T> proj;   // 1x1, c -> c/2
  ConvKernel<T> rate;   // 3x3, c/2 -> 1, the rate learning layer
  ConvKernel<T> adapt;  // 3x3, c/2 -> c/2, per-pixel rates
  ConvKernel<T> fuse;   // 1x1, c -> c/2, after concatenation
  double sigma = 0.01;

  /// Rate layer weights ~ N(0, sigma^2) with sigma << 1 and bias ones, so a
  /// fresh module starts as (approximately) a standard rate-1 convolution.
  static KamParams init(std::int64_t c, Rng& rng, double sigma = 0.01) {
    require(c % 2 == 0, "KamParams: channel count must be even");
    KamParams p;
    p.sigma = sigma;
    p.proj = ConvKernel<T>::he(c / 2, c, 1, 1, rng);
    p.rate.w = Tensor<T>::randn(Shape{1, c / 2, 3, 3}, rng, sigma, true);
    p.rate.b = Tensor<T>::full(Shape{1, 1, 1, 1}, T(1), true);
    p.adapt = ConvKernel<T>::he(c / 2, c / 2, 3, 3, rng);
    p.fuse = ConvKernel<T>::he(c / 2, c, 1, 1, rng);
    return p;
  }
};

template <class T>
struct KamResult {
  Tensor<T> out;       // (N, c/2, 2h, 2w)
  Tensor<T> rate_map;  // (N, 1, 2h, 2w), clamped rates actually applied
};

template <class T>
KamResult<T> kam_forward(Graph<T>* g, const Tensor<T>& x0, const Tensor<T>& x1,
                         const KamParams<T>& p) {
  Shape s0 = x0.shape(), s1 = x1.shape();
  require(s0.n == s1.n && s0.c * 2 == s1.c && s0.h == 2 * s1.h && s0.w == 2 * s1.w,
          "kam_forward: expected x0 (N,c/2,2h,2w) with x1 (N,c,h,w); got x0 " +
              s0.str() + " x1 " + s1.str());
  Tensor<T> up = upsample2x(g, x1);
  Tensor<T> o1 = relu(g, conv2d(g, up, p.proj));
  Tensor<T> r_raw = conv2d(g, o1, p.rate);  // linear output; see init contract
  Tensor<T> r = clamp(g, r_raw, T(0), T(kRateMax));
  Tensor<T> o0 = adaptive_dilated_conv(g, x0, r, p.adapt);
  Tensor<T> fused = relu(g, conv2d(g, concat_channels(g, o0, o1), p.fuse));
  return {fused, r};
}

// ---------------------------------------------------------------------------
// Encoder / decoder blocks
// ---------------------------------------------------------------------------

/// Stride-2 3x3 convolution doubling the channels, then an AAC, ReLU after
/// each; halves H and W.
template <class T>
struct DownBlock {
  ConvKernel<T> conv;  // 3x3 stride 2, c -> 2c
  AacParams<T> aac;    // 2c -> 2c

  static DownBlock init(std::int64_t c_in, Rng& rng) {
    DownBlock b;
    b.conv = ConvKernel<T>::he(c_in * 2, c_in, 3, 3, rng, /*stride=*/2);
    b.aac = AacParams<T>::init(c_in * 2, rng);
    return b;
  }
};

template <class T>
Tensor<T> down_aac_block(Graph<T>* g, const Tensor<T>& x, const DownBlock<T>& blk) {
  Tensor<T> y = relu(g, conv2d(g, x, blk.conv));
  return relu(g, aac_forward(g, y, blk.aac));
}

/// Bilinear x2 upsample, then a 3x3 convolution halving the channels, then an
/// AAC; ReLU after each convolution.
template <class T>
struct UpBlock {
  ConvKernel<T> conv;  // 3x3 stride 1, c -> c/2
  AacParams<T> aac;    // c/2 -> c/2

  static UpBlock init(std::int64_t c_in, Rng& rng) {
    require(c_in % 2 == 0, "UpBlock: channel count must be even");
    UpBlock b;
    b.conv = ConvKernel<T>::he(c_in / 2, c_in, 3, 3, rng);
    b.aac = AacParams<T>::init(c_in / 2, rng);
    return b;
  }
};

template <class T>
Tensor<T> up_aac_block(Graph<T>* g, const Tensor<T>& x, const UpBlock<T>& blk) {
  Tensor<T> y = upsample2x(g, x);
  y = relu(g, conv2d(g, y, blk.conv));
  return relu(g, aac_forward(g, y, blk.aac));
}

}  // namespace cseg
