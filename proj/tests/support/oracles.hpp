#pragma once

// Test-only oracles, kept independent of the library's implementation paths:
// a brute-force convolution written straight from the definition, scalar loss
// evaluations, and a scalar Adam trace.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "cseg/tensor.hpp"

namespace oracle {

/// Naive same-padded dilated cross-correlation: for every output element,
/// walk the kernel and sum in * w, reading zero outside the input.
template <class T>
cseg::Tensor<T> reference_conv2d(const cseg::Tensor<T>& x, const cseg::Tensor<T>& w,
                                 const cseg::Tensor<T>& b, int stride, int dil) {
  const cseg::Shape xs = x.shape(), ws = w.shape();
  const std::int64_t out_h = (xs.h + stride - 1) / stride;
  const std::int64_t out_w = (xs.w + stride - 1) / stride;
  const std::int64_t pad_h =
      std::max<std::int64_t>(0, (out_h - 1) * stride + (ws.h - 1) * dil + 1 - xs.h) / 2;
  const std::int64_t pad_w =
      std::max<std::int64_t>(0, (out_w - 1) * stride + (ws.w - 1) * dil + 1 - xs.w) / 2;
  cseg::Tensor<T> out = cseg::Tensor<T>::zeros(cseg::Shape{xs.n, ws.n, out_h, out_w});
  for (std::int64_t n = 0; n < xs.n; ++n)
    for (std::int64_t co = 0; co < ws.n; ++co)
      for (std::int64_t oy = 0; oy < out_h; ++oy)
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          T acc = b.defined() ? b.at(0, co, 0, 0) : T(0);
          for (std::int64_t ci = 0; ci < ws.c; ++ci)
            for (std::int64_t ky = 0; ky < ws.h; ++ky)
              for (std::int64_t kx = 0; kx < ws.w; ++kx) {
                const std::int64_t iy = oy * stride - pad_h + ky * dil;
                const std::int64_t ix = ox * stride - pad_w + kx * dil;
                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                acc += x.at(n, ci, iy, ix) * w.at(co, ci, ky, kx);
              }
          out.at(n, co, oy, ox) = acc;
        }
  return out;
}

/// Eq-style scalar evaluation of the mutual loss at one (p_f, p_b) pair.
inline double mutual_scalar(double pf, double pb) {
  const double q = 1.0 - pb;
  const double m = pf + q;
  const double js = 0.5 * pf * std::log(2.0 * pf / m) + 0.5 * q * std::log(2.0 * q / m);
  return js + 2.0 * pf * pb / (pf + pb);
}

inline double focal_scalar(double p) { return (1.0 - p) * (1.0 - p) * (-std::log(p)); }

/// One Adam step on a scalar, straight from the update equations.
struct ScalarAdam {
  double m = 0, v = 0;
  std::int64_t t = 0;
  double beta1 = 0.5, beta2 = 0.999, eps = 1e-8;

  double step(double p, double g, double lr) {
    ++t;
    m = beta1 * m + (1 - beta1) * g;
    v = beta2 * v + (1 - beta2) * g * g;
    const double mhat = m / (1 - std::pow(beta1, double(t)));
    const double vhat = v / (1 - std::pow(beta2, double(t)));
    return p - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

inline std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE_MESSAGE(bool(is), ("cannot open " + path).c_str());
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace oracle
