#pragma once

/// Loss system for the complementary pair: focal + soft-Jaccard terms for the
/// foreground and background networks, a mutual loss (Jensen-Shannon
/// agreement between p_f and 1 - p_b plus a harmonic-mean exclusion term),
/// and the semi-supervised total that routes labeled samples through all
/// three terms and unlabeled samples through the mutual term only.
///
/// Probabilities entering a loss are clamped to [kEps, 1 - kEps] first.
/// soft_jaccard takes its inputs raw (binary inputs must score exactly).
/// All losses are built from taped primitives, so gradients come from the
/// tape and are covered by gradcheck.

#include <cstdint>
#include <vector>

#include "cseg/tensor.hpp"

namespace cseg {

enum class JaccardMode {
  image,     // per-image intersection / union, batch-averaged
  per_pixel  // literal per-pixel ratio sum, normalized by N*n
};

namespace detail {

template <class T>
Tensor<T> clamp_prob(Graph<T>* g, const Tensor<T>& p) {
  return clamp(g, p, T(kEps), T(1) - T(kEps));
}

}  // namespace detail

/// Mean over all pixels of (1 - p)^2 * (-log p), p being the probability of
/// the true class. Zero when every p is 1.
template <class T>
Tensor<T> focal_term(Graph<T>* g, const Tensor<T>& p_correct) {
  Tensor<T> p = detail::clamp_prob(g, p_correct);
  Tensor<T> one_minus = sub(g, T(1), p);
  Tensor<T> sq = mul(g, one_minus, one_minus);
  Tensor<T> nll = mul(g, log(g, p), T(-1));
  return mean_all(g, mul(g, sq, nll));
}

/// Image-level soft Jaccard: J_i = sum(p*t) / sum(p + t - p*t) over the
/// pixels of image i, averaged over the batch. A blank target together with a
/// blank prediction scores J_i = 1.
template <class T>
Tensor<T> soft_jaccard(Graph<T>* g, const Tensor<T>& p, const Tensor<T>& t) {
  Tensor<T> pt = mul(g, p, t);
  Tensor<T> inter = sum_chw(g, pt);
  Tensor<T> uni = sum_chw(g, sub(g, add(g, p, t), pt));
  Tensor<T> j = div_or_one(g, inter, uni);
  return mean_all(g, j);
}

/// Literal per-pixel ratio reading of the Jaccard term: mean over N*n of
/// p*t / (p + t - p*t). With binary t this degenerates to capturing only
/// t = 1 pixels; provided for comparison against the image-level form.
template <class T>
Tensor<T> per_pixel_jaccard(Graph<T>* g, const Tensor<T>& p, const Tensor<T>& t) {
  Tensor<T> pt = mul(g, p, t);
  Tensor<T> ratio = div_or_one(g, pt, sub(g, add(g, p, t), pt));
  return mean_all(g, ratio);
}

namespace detail {

template <class T>
Tensor<T> focal_plus_jaccard(Graph<T>* g, const Tensor<T>& prob, const Tensor<T>& target,
                             JaccardMode jm) {
  // probability of the true class per pixel: t*p + (1-t)*(1-p)
  Tensor<T> p_correct = add(g, mul(g, prob, target),
                            mul(g, sub(g, T(1), prob), sub(g, T(1), target)));
  Tensor<T> focal = focal_term(g, p_correct);
  Tensor<T> pc = clamp_prob(g, prob);
  Tensor<T> j = jm == JaccardMode::image ? soft_jaccard(g, pc, target)
                                         : per_pixel_jaccard(g, pc, target);
  return add(g, focal, sub(g, T(1), j));
}

}  // namespace detail

/// L_fore = focal(correct-class prob of the foreground net) + (1 - J(p_f, y)).
/// p_f: (N,1,H,W) melanoma probability, y: (N,1,H,W) binary ground truth.
template <class T>
Tensor<T> foreground_loss(Graph<T>* g, const Tensor<T>& p_f, const Tensor<T>& y,
                          JaccardMode jm = JaccardMode::image) {
  require(p_f.shape() == y.shape(), "foreground_loss: shape mismatch");
  return detail::focal_plus_jaccard(g, p_f, y, jm);
}

/// Mirror of the foreground loss with p_b against target 1 - y.
template <class T>
Tensor<T> background_loss(Graph<T>* g, const Tensor<T>& p_b, const Tensor<T>& y,
                          JaccardMode jm = JaccardMode::image) {
  require(p_b.shape() == y.shape(), "background_loss: shape mismatch");
  return detail::focal_plus_jaccard(g, p_b, sub(g, T(1), y), jm);
}

/// Mean over N*n of
///   (p_f/2) log(2 p_f / (p_f + q)) + (q/2) log(2 q / (p_f + q))
///   + 2 p_f p_b / (p_f + p_b),          q = 1 - p_b.
/// The first two terms measure disagreement between the foreground
/// probability and the complement of the background probability; the third
/// penalizes overlap of the two networks' positive predictions.
template <class T>
Tensor<T> mutual_loss(Graph<T>* g, const Tensor<T>& p_f, const Tensor<T>& p_b) {
  require(p_f.shape() == p_b.shape(), "mutual_loss: shape mismatch");
  Tensor<T> pf = detail::clamp_prob(g, p_f);
  Tensor<T> pb = detail::clamp_prob(g, p_b);
  Tensor<T> q = sub(g, T(1), pb);
  Tensor<T> m = add(g, pf, q);
  Tensor<T> js1 = mul(g, mul(g, pf, T(0.5)), log(g, div(g, mul(g, pf, T(2)), m)));
  Tensor<T> js2 = mul(g, mul(g, q, T(0.5)), log(g, div(g, mul(g, q, T(2)), m)));
  Tensor<T> excl = div(g, mul(g, mul(g, pf, pb), T(2)), add(g, pf, pb));
  return mean_all(g, add(g, add(g, js1, js2), excl));
}

template <class T>
struct TotalLoss {
  Tensor<T> total;
  Tensor<T> fore;    // undefined when the batch has no labeled samples
  Tensor<T> back;    // undefined likewise
  Tensor<T> mutual;
};

/// L = L_fore(labeled) + L_back(labeled) + L_mutual(all samples).
/// labeled_idx selects the batch rows with ground truth; y holds one mask row
/// per labeled index, in the same order.
template <class T>
TotalLoss<T> total_loss(Graph<T>* g, const Tensor<T>& p_f, const Tensor<T>& p_b,
                        const Tensor<T>& y, const std::vector<std::int64_t>& labeled_idx,
                        JaccardMode jm = JaccardMode::image) {
  TotalLoss<T> r;
  r.mutual = mutual_loss(g, p_f, p_b);
  if (labeled_idx.empty()) {
    r.total = r.mutual;
    return r;
  }
  require(y.shape().n == std::int64_t(labeled_idx.size()),
          "total_loss: mask count does not match labeled index count");
  Tensor<T> pf_lab = slice_batch(g, p_f, labeled_idx);
  Tensor<T> pb_lab = slice_batch(g, p_b, labeled_idx);
  r.fore = foreground_loss(g, pf_lab, y, jm);
  r.back = background_loss(g, pb_lab, y, jm);
  r.total = add(g, add(g, r.fore, r.back), r.mutual);
  return r;
}

}  // namespace cseg
