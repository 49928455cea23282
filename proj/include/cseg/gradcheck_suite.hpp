#pragma once

/// Named gradient checks for every differentiable operator, at 64-bit
/// precision. Drives the `gradcheck` CLI subcommand.
///
/// Inputs are drawn away from the non-smooth points of the checked functions
/// (ReLU zeros, clamp edges, integer sample coordinates): central differences
/// straddling a kink say nothing about the gradient on either side. Where an
/// operator computes its own interior activations (KAM, down block), the
/// fixture deterministically advances the seed until every pre-activation and
/// rate-map entry clears the kink by a safe margin, then checks there.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cseg/gradcheck.hpp"
#include "cseg/losses.hpp"
#include "cseg/network.hpp"
#include "cseg/ops.hpp"

namespace cseg {

struct GradcheckCase {
  std::string op;
  std::string wrt;
  GradcheckReport report;
};

namespace gcsuite {

using D = double;
using Td = Tensor<double>;
using Gd = Graph<double>;

/// Random values with magnitude in [0.2, 1.5] and random sign: clear of the
/// ReLU kink and of clamp edges used in the checks.
inline Td signed_randu(Shape s, Rng& rng) {
  Td t = Tensor<D>::zeros(s);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    double v = rng.uniform(0.2, 1.5);
    t.data()[i] = rng.bernoulli(0.5) ? v : -v;
  }
  return t;
}

/// Rates in (0.2, 2.8) pushed at least 0.08 away from every integer (and from
/// the clamp bounds), so an eps = 1e-3 perturbation cannot cross a bilinear
/// kink.
inline Td safe_rates(Shape s, Rng& rng) {
  Td t = Tensor<D>::zeros(s);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    double r = rng.uniform(0.2, 2.8);
    double frac = r - std::floor(r);
    if (frac < 0.08) r += 0.1;
    if (frac > 0.92) r -= 0.1;
    t.data()[i] = r;
  }
  return t;
}

inline double min_abs(const Td& t) {
  double m = 1e300;
  for (std::int64_t i = 0; i < t.numel(); ++i) m = std::min(m, std::abs(t.data()[i]));
  return m;
}

inline double min_int_distance(const Td& t) {
  double m = 1e300;
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    double v = t.data()[i];
    m = std::min({m, std::abs(v - std::round(v)), std::abs(v), std::abs(kRateMax - v)});
  }
  return m;
}

struct KamFixture {
  Td x0, x1;
  KamParams<D> params;
};

/// Deterministically advances the sub-seed until every ReLU pre-activation
/// inside the module is at least 0.01 from zero and every rate-map pixel at
/// least 0.05 from an integer and from the clamp bounds. The rate layer is
/// set up to land all rates inside the integer-free band (1.05, 1.95), with
/// weights large enough that the rate path still carries real gradient.
inline KamFixture make_kam_fixture(std::uint64_t seed) {
  for (std::uint64_t k = 0; k < 5000; ++k) {
    Rng rng(Rng::derive(seed, 0xA0 + k));
    KamFixture f;
    f.x1 = Tensor<D>::randu(Shape{1, 4, 4, 4}, rng, -1.0, 1.0);
    f.x0 = Tensor<D>::randu(Shape{1, 2, 8, 8}, rng, -1.0, 1.0);
    f.params = KamParams<D>::init(4, rng);
    f.params.rate.w = Tensor<D>::randu(f.params.rate.w.shape(), rng, -0.04, 0.04, true);
    f.params.rate.b = Tensor<D>::full(Shape{1, 1, 1, 1}, 1.5, true);

    Td up = upsample2x<D>(nullptr, f.x1);
    Td o1_pre = conv2d<D>(nullptr, up, f.params.proj);
    Td o1 = relu<D>(nullptr, o1_pre);
    Td r = conv2d<D>(nullptr, o1, f.params.rate);
    Td o0 = adaptive_dilated_conv<D>(nullptr, f.x0, clamp<D>(nullptr, r, 0.0, kRateMax),
                                     f.params.adapt);
    Td fused_pre = conv2d<D>(nullptr, concat_channels<D>(nullptr, o0, o1), f.params.fuse);
    if (min_abs(o1_pre) > 0.01 && min_abs(fused_pre) > 0.01 && min_int_distance(r) > 0.05)
      return f;
  }
  throw error("make_kam_fixture: no safe fixture found");
}

struct DownFixture {
  Td x;
  DownBlock<D> block;
};

inline DownFixture make_down_fixture(std::uint64_t seed) {
  for (std::uint64_t k = 0; k < 1000; ++k) {
    Rng rng(Rng::derive(seed, 0xB0 + k));
    DownFixture f;
    f.x = Tensor<D>::randu(Shape{1, 2, 6, 6}, rng, -1.0, 1.0);
    f.block = DownBlock<D>::init(2, rng);
    Td conv_pre = conv2d<D>(nullptr, f.x, f.block.conv);
    Td aac_pre = aac_forward<D>(nullptr, relu<D>(nullptr, conv_pre), f.block.aac);
    if (min_abs(conv_pre) > 0.02 && min_abs(aac_pre) > 0.02) return f;
  }
  throw error("make_down_fixture: no safe fixture found");
}

}  // namespace gcsuite

/// All registered operator names, in run order.
inline std::vector<std::string> gradcheck_op_names() {
  return {"add",        "sub",        "mul",          "div",
          "div_or_one", "log",        "exp",          "sigmoid",
          "relu",       "clamp",      "sum",          "mean",
          "sum_chw",    "concat_channels", "slice_channels", "slice_batch",
          "softmax",    "conv2d",     "conv2d_stride2", "conv2d_dilated",
          "aac",        "bilinear_sample", "adaptive_dilated_conv", "upsample2x",
          "down_aac_block", "kam",    "focal_term",   "soft_jaccard",
          "foreground_loss", "background_loss", "mutual_loss", "total_loss"};
}

/// Runs the checks registered under `op` (one per differentiable argument).
inline std::vector<GradcheckCase> run_gradcheck_op(const std::string& op, double eps,
                                                   double tol, std::uint64_t seed,
                                                   std::int64_t max_checks = 0) {
  using namespace gcsuite;
  Rng rng(Rng::derive(seed, std::hash<std::string>{}(op)));
  std::vector<GradcheckCase> cases;
  auto check = [&](const std::string& wrt, auto&& fn, Td input) {
    cases.push_back({op, wrt, gradcheck(fn, input, eps, tol, max_checks)});
  };

  const Shape es{2, 3, 4, 5};
  if (op == "add" || op == "sub" || op == "mul" || op == "div") {
    Td a = signed_randu(es, rng);
    Td b = signed_randu(es, rng);
    auto apply = [op](Gd* g, const Td& x, const Td& y) {
      if (op == "add") return add(g, x, y);
      if (op == "sub") return sub(g, x, y);
      if (op == "mul") return mul(g, x, y);
      return div(g, x, y);
    };
    check("a", [&](Gd* g, const Td& x) { return sum_all(g, apply(g, x, b)); }, a.clone());
    check("b", [&](Gd* g, const Td& x) { return sum_all(g, apply(g, a, x)); }, b.clone());
  } else if (op == "div_or_one") {
    Td num = signed_randu(es, rng);
    Td den = signed_randu(es, rng);
    check("num", [&](Gd* g, const Td& x) { return sum_all(g, div_or_one(g, x, den)); }, num.clone());
    check("den", [&](Gd* g, const Td& x) { return sum_all(g, div_or_one(g, num, x)); }, den.clone());
  } else if (op == "log") {
    check("x", [](Gd* g, const Td& x) { return sum_all(g, log(g, x)); },
          Tensor<D>::randu(es, rng, 0.1, 2.0));
  } else if (op == "exp") {
    check("x", [](Gd* g, const Td& x) { return sum_all(g, exp(g, x)); }, signed_randu(es, rng));
  } else if (op == "sigmoid") {
    check("x", [](Gd* g, const Td& x) { return sum_all(g, sigmoid(g, x)); }, signed_randu(es, rng));
  } else if (op == "relu") {
    check("x", [](Gd* g, const Td& x) { return sum_all(g, relu(g, x)); }, signed_randu(es, rng));
  } else if (op == "clamp") {
    Td x = signed_randu(es, rng);
    for (std::int64_t i = 0; i < x.numel(); ++i) {  // keep clear of the 1.2 edges
      double& v = x.data()[i];
      if (std::abs(std::abs(v) - 1.2) < 0.05) v += v > 0 ? 0.1 : -0.1;
    }
    check("x", [](Gd* g, const Td& xv) { return sum_all(g, clamp(g, xv, -1.2, 1.2)); }, x);
  } else if (op == "sum") {
    check("x", [](Gd* g, const Td& x) { return sum_all(g, x); }, signed_randu(es, rng));
  } else if (op == "mean") {
    check("x", [](Gd* g, const Td& x) { return mean_all(g, x); }, signed_randu(es, rng));
  } else if (op == "sum_chw") {
    Td wsum = Tensor<D>::randu(Shape{es.n, 1, 1, 1}, rng, 0.5, 1.5);
    check("x", [&](Gd* g, const Td& x) { return sum_all(g, mul(g, sum_chw(g, x), wsum)); },
          signed_randu(es, rng));
  } else if (op == "concat_channels") {
    Td a = signed_randu(Shape{2, 2, 3, 3}, rng);
    Td b = signed_randu(Shape{2, 3, 3, 3}, rng);
    Td wgt = Tensor<D>::randu(Shape{2, 5, 3, 3}, rng, -1.0, 1.0);
    auto weighted = [&](Gd* g, const Td& cat) { return sum_all(g, mul(g, cat, wgt)); };
    check("a", [&](Gd* g, const Td& x) { return weighted(g, concat_channels(g, x, b)); }, a.clone());
    check("b", [&](Gd* g, const Td& x) { return weighted(g, concat_channels(g, a, x)); }, b.clone());
  } else if (op == "slice_channels") {
    Td a = signed_randu(Shape{2, 4, 3, 3}, rng);
    check("x", [](Gd* g, const Td& x) { return sum_all(g, slice_channels(g, x, 1, 3)); }, a);
  } else if (op == "slice_batch") {
    Td a = signed_randu(Shape{3, 2, 3, 3}, rng);
    std::vector<std::int64_t> idx{2, 0, 2};  // repeats exercise accumulation
    check("x", [&](Gd* g, const Td& x) { return sum_all(g, slice_batch(g, x, idx)); }, a);
  } else if (op == "softmax") {
    Td a = signed_randu(Shape{2, 2, 3, 3}, rng);
    Td wgt = Tensor<D>::randu(a.shape(), rng, -1.0, 1.0);
    check("logits",
          [&](Gd* g, const Td& x) { return sum_all(g, mul(g, softmax_channels(g, x), wgt)); }, a);
  } else if (op == "conv2d" || op == "conv2d_stride2" || op == "conv2d_dilated") {
    const int stride = op == "conv2d_stride2" ? 2 : 1;
    const int dil = op == "conv2d_dilated" ? 2 : 1;
    Td x = signed_randu(Shape{2, 3, 6, 5}, rng);
    ConvKernel<D> k = ConvKernel<D>::he(4, 3, 3, 3, rng, stride, dil);
    auto run = [&](Gd* g, const Td& xin) { return sum_all(g, conv2d(g, xin, k)); };
    check("input", run, x.clone());
    check("weights", [&](Gd* g, const Td& wv) {
      ConvKernel<D> k2 = k;
      k2.w = wv;
      return sum_all(g, conv2d(g, x, k2));
    }, k.w.clone());
    check("bias", [&](Gd* g, const Td& bv) {
      ConvKernel<D> k2 = k;
      k2.b = bv;
      return sum_all(g, conv2d(g, x, k2));
    }, k.b.clone());
  } else if (op == "aac") {
    Td x = signed_randu(Shape{1, 2, 6, 6}, rng);
    AacParams<D> p = AacParams<D>::init(2, rng);
    p.gamma = Tensor<D>::randu(p.gamma.shape(), rng, 0.2, 0.8, true);
    auto with = [&](AacParams<D> q, Gd* g) { return sum_all(g, aac_forward(g, x, q)); };
    check("input", [&](Gd* g, const Td& xv) { return sum_all(g, aac_forward(g, xv, p)); }, x.clone());
    check("kernel", [&](Gd* g, const Td& wv) {
      AacParams<D> q = p;
      q.kernel.w = wv;
      return with(q, g);
    }, p.kernel.w.clone());
    check("gamma", [&](Gd* g, const Td& gv) {
      AacParams<D> q = p;
      q.gamma = gv;
      return with(q, g);
    }, p.gamma.clone());
    check("bias", [&](Gd* g, const Td& bv) {
      AacParams<D> q = p;
      q.kernel.b = bv;
      return with(q, g);
    }, p.kernel.b.clone());
  } else if (op == "bilinear_sample") {
    Td f = signed_randu(Shape{1, 2, 4, 5}, rng);
    Td yc = Tensor<D>::scalar(1.43);
    Td xc = Tensor<D>::scalar(2.61);
    check("feature",
          [&](Gd* g, const Td& fv) { return bilinear_sample(g, fv, yc, xc, 0, 1); }, f.clone());
    check("y", [&](Gd* g, const Td& yv) { return bilinear_sample(g, f, yv, xc, 0, 1); }, yc.clone());
    check("x", [&](Gd* g, const Td& xv) { return bilinear_sample(g, f, yc, xv, 0, 1); }, xc.clone());
  } else if (op == "adaptive_dilated_conv") {
    Td x0 = signed_randu(Shape{1, 2, 6, 6}, rng);
    Td rate1 = safe_rates(Shape{1, 1, 6, 6}, rng);
    ConvKernel<D> k = ConvKernel<D>::he(2, 2, 3, 3, rng);
    Td wgt = Tensor<D>::randu(Shape{1, 2, 6, 6}, rng, -1.0, 1.0);
    auto run = [&](Gd* g, const Td& xv, const Td& rv, const ConvKernel<D>& kv) {
      return sum_all(g, mul(g, adaptive_dilated_conv(g, xv, rv, kv), wgt));
    };
    check("input", [&](Gd* g, const Td& xv) { return run(g, xv, rate1, k); }, x0.clone());
    {
      // the spec's named case: rate-map gradient on a 1x1x6x6 random input
      Td x1ch = signed_randu(Shape{1, 1, 6, 6}, rng);
      ConvKernel<D> k1 = ConvKernel<D>::he(1, 1, 3, 3, rng);
      Td w1 = Tensor<D>::randu(Shape{1, 1, 6, 6}, rng, -1.0, 1.0);
      check("rate_map", [&](Gd* g, const Td& rv) {
        return sum_all(g, mul(g, adaptive_dilated_conv(g, x1ch, rv, k1), w1));
      }, safe_rates(Shape{1, 1, 6, 6}, rng));
    }
    check("weights", [&](Gd* g, const Td& wv) {
      ConvKernel<D> k2 = k;
      k2.w = wv;
      return run(g, x0, rate1, k2);
    }, k.w.clone());
    check("bias", [&](Gd* g, const Td& bv) {
      ConvKernel<D> k2 = k;
      k2.b = bv;
      return run(g, x0, rate1, k2);
    }, k.b.clone());
  } else if (op == "upsample2x") {
    Td x = signed_randu(Shape{2, 2, 3, 4}, rng);
    Td wgt = Tensor<D>::randu(Shape{2, 2, 6, 8}, rng, -1.0, 1.0);
    check("x", [&](Gd* g, const Td& xv) { return sum_all(g, mul(g, upsample2x(g, xv), wgt)); }, x);
  } else if (op == "down_aac_block") {
    auto f = make_down_fixture(seed);
    check("input",
          [&](Gd* g, const Td& xv) { return sum_all(g, down_aac_block(g, xv, f.block)); },
          f.x.clone());
    check("conv.w", [&](Gd* g, const Td& wv) {
      DownBlock<D> b = f.block;
      b.conv.w = wv;
      return sum_all(g, down_aac_block(g, f.x, b));
    }, f.block.conv.w.clone());
    check("aac.gamma", [&](Gd* g, const Td& gv) {
      DownBlock<D> b = f.block;
      b.aac.gamma = gv;
      return sum_all(g, down_aac_block(g, f.x, b));
    }, f.block.aac.gamma.clone());
  } else if (op == "kam") {
    auto f = make_kam_fixture(seed);
    auto run = [&](Gd* g, const Td& x0v, const Td& x1v, const KamParams<D>& pv) {
      auto res = kam_forward(g, x0v, x1v, pv);
      return sum_all(g, res.out);
    };
    check("x0", [&](Gd* g, const Td& v) { return run(g, v, f.x1, f.params); }, f.x0.clone());
    check("x1", [&](Gd* g, const Td& v) { return run(g, f.x0, v, f.params); }, f.x1.clone());
    auto check_kernel = [&](const std::string& name, ConvKernel<D> KamParams<D>::* member) {
      check(name + ".w", [&, member](Gd* g, const Td& v) {
        KamParams<D> q = f.params;
        (q.*member).w = v;
        return run(g, f.x0, f.x1, q);
      }, (f.params.*member).w.clone());
      check(name + ".b", [&, member](Gd* g, const Td& v) {
        KamParams<D> q = f.params;
        (q.*member).b = v;
        return run(g, f.x0, f.x1, q);
      }, (f.params.*member).b.clone());
    };
    check_kernel("proj", &KamParams<D>::proj);
    check_kernel("rate", &KamParams<D>::rate);
    check_kernel("adapt", &KamParams<D>::adapt);
    check_kernel("fuse", &KamParams<D>::fuse);
  } else if (op == "focal_term") {
    check("p", [](Gd* g, const Td& p) { return focal_term(g, p); },
          Tensor<D>::randu(Shape{2, 1, 3, 3}, rng, 0.10, 0.90));
  } else if (op == "soft_jaccard") {
    Td t = Tensor<D>::zeros(Shape{2, 1, 3, 3});
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    check("p", [&](Gd* g, const Td& p) { return soft_jaccard(g, p, t); },
          Tensor<D>::randu(Shape{2, 1, 3, 3}, rng, 0.10, 0.90));
  } else if (op == "foreground_loss" || op == "background_loss") {
    Td y = Tensor<D>::zeros(Shape{2, 1, 3, 3});
    for (std::int64_t i = 0; i < y.numel(); ++i) y.data()[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    auto fn = [&](Gd* g, const Td& p) {
      return op == "foreground_loss" ? foreground_loss(g, p, y) : background_loss(g, p, y);
    };
    check("p", fn, Tensor<D>::randu(Shape{2, 1, 3, 3}, rng, 0.10, 0.90));
  } else if (op == "mutual_loss") {
    Td pb = Tensor<D>::randu(Shape{2, 1, 3, 3}, rng, 0.10, 0.90);
    Td pf = Tensor<D>::randu(Shape{2, 1, 3, 3}, rng, 0.10, 0.90);
    check("p_f", [&](Gd* g, const Td& p) { return mutual_loss(g, p, pb); }, pf.clone());
    check("p_b", [&](Gd* g, const Td& p) { return mutual_loss(g, pf, p); }, pb.clone());
  } else if (op == "total_loss") {
    // The summed loss terms pull p_f / p_b in opposite directions, so a
    // random element can sit near a zero crossing of the total gradient,
    // where relative error against finite differences is meaningless.
    // Deterministically reseed until every element carries real gradient.
    std::vector<std::int64_t> lab{0, 2};
    Td pf, pb, y;
    for (int attempt = 0; attempt < 200; ++attempt) {
      pf = Tensor<D>::randu(Shape{4, 1, 3, 3}, rng, 0.10, 0.90);
      pb = Tensor<D>::randu(Shape{4, 1, 3, 3}, rng, 0.10, 0.90);
      y = Tensor<D>::zeros(Shape{2, 1, 3, 3});
      for (std::int64_t i = 0; i < y.numel(); ++i) y.data()[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
      pf.set_requires_grad(true);
      pb.set_requires_grad(true);
      Gd g;
      g.backward(total_loss(&g, pf, pb, y, lab).total);
      double lo = 1e300;
      for (std::int64_t i = 0; i < pf.numel(); ++i)
        lo = std::min({lo, std::abs(pf.grad()[i]), std::abs(pb.grad()[i])});
      pf.set_requires_grad(false);
      pb.set_requires_grad(false);
      if (lo > 2e-3) break;
    }
    check("p_f", [&](Gd* g, const Td& p) { return total_loss(g, p, pb, y, lab).total; }, pf.clone());
    check("p_b", [&](Gd* g, const Td& p) { return total_loss(g, pf, p, y, lab).total; }, pb.clone());
  } else {
    throw config_error("unknown gradcheck op '" + op + "'");
  }
  return cases;
}

}  // namespace cseg
