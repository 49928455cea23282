#pragma once

/// Pixel-level evaluation: accuracy, Dice, Jaccard and sensitivity from a
/// per-image confusion at threshold 0.5, with mean/std aggregation.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cseg/tensor.hpp"

namespace cseg {

struct Confusion {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::int64_t total() const { return tp + fp + tn + fn; }
};

/// Both masks must be strictly binary (0 or 1).
template <class T>
Confusion confusion(const Tensor<T>& pred, const Tensor<T>& gt) {
  require(pred.shape() == gt.shape(), "confusion: shape mismatch");
  Confusion c;
  const T* p = pred.data();
  const T* t = gt.data();
  const std::int64_t n = pred.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    if ((p[i] != T(0) && p[i] != T(1)) || (t[i] != T(0) && t[i] != T(1)))
      throw error("confusion: non-binary mask value");
    if (t[i] == T(1))
      p[i] == T(1) ? ++c.tp : ++c.fn;
    else
      p[i] == T(1) ? ++c.fp : ++c.tn;
  }
  return c;
}

struct MetricScores {
  double ac = 0, di = 0, ja = 0, se = 0;
};

/// AC = (tp+tn)/n, DI = 2tp/(2tp+fp+fn), JA = tp/(tp+fp+fn), SE = tp/(tp+fn).
/// Empty ground truth: DI = JA = 1 if fp == 0 else 0; SE = 1.
inline MetricScores scores(const Confusion& c) {
  MetricScores m;
  const double n = double(c.total());
  m.ac = n > 0 ? double(c.tp + c.tn) / n : 1.0;
  if (c.tp + c.fn == 0) {
    m.se = 1.0;
    m.di = m.ja = c.fp == 0 ? 1.0 : 0.0;
  } else {
    m.se = double(c.tp) / double(c.tp + c.fn);
    m.di = 2.0 * double(c.tp) / double(2 * c.tp + c.fp + c.fn);
    m.ja = double(c.tp) / double(c.tp + c.fp + c.fn);
  }
  return m;
}

struct MeanStd {
  double mean = 0, std = 0;
};

/// Population standard deviation; a single value reports std 0.
inline MeanStd aggregate(const std::vector<double>& xs) {
  require(!xs.empty(), "aggregate: empty series");
  MeanStd r;
  for (double x : xs) r.mean += x;
  r.mean /= double(xs.size());
  double acc = 0;
  for (double x : xs) acc += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(acc / double(xs.size()));
  return r;
}

}  // namespace cseg
