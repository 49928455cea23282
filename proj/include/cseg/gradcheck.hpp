#pragma once

/// Finite-difference gradient verification.
///
/// Compares the taped analytic gradient against central differences
/// (f(x+e) - f(x-e)) / 2e, element by element, at 64-bit precision. This is
/// the project's universal oracle: it exercises only forward evaluations on
/// the numeric side, so it stays independent of every backward implementation
/// it checks.

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "cseg/tensor.hpp"

namespace cseg {

struct GradcheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  std::int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::int64_t checked = 0;

  std::string str() const {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s max_rel_err=%.3e at #%lld (analytic=%.6e numeric=%.6e, n=%lld)",
                  pass ? "PASS" : "FAIL", max_rel_err, (long long)worst_index,
                  worst_analytic, worst_numeric, (long long)checked);
    return buf;
  }
};

/// f: (Graph<double>*, const Tensor<double>& x) -> scalar Tensor<double>.
/// Perturbs each element of `input` in place (restoring it afterwards).
/// Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
/// `max_checks` > 0 verifies only that many elements, stepping evenly through
/// the tensor from a fixed offset.
template <class F>
GradcheckReport gradcheck(F&& f, Tensor<double> input, double eps = 1e-3,
                          double tol = 1e-4, std::int64_t max_checks = 0) {
  // Determinism gate: two grad-free evaluations must agree bitwise.
  {
    Tensor<double> a = f(static_cast<Graph<double>*>(nullptr), input);
    Tensor<double> b = f(static_cast<Graph<double>*>(nullptr), input);
    require(a.numel() == 1 && b.numel() == 1, "gradcheck: f must return a scalar");
    if (a.data()[0] != b.data()[0])
      throw error("gradcheck: f is not deterministic (two evaluations disagree)");
  }

  input.set_requires_grad(true);
  input.zero_grad();
  Graph<double> g;
  Tensor<double> loss = f(&g, input);
  g.backward(loss);

  std::vector<double> analytic(input.grad(), input.grad() + input.numel());

  const std::int64_t n = input.numel();
  std::int64_t step = 1, start = 0;
  if (max_checks > 0 && max_checks < n) {
    step = n / max_checks;
    start = step / 2;
  }

  GradcheckReport rep;
  rep.pass = true;
  double* x = input.data();
  for (std::int64_t i = start; i < n; i += step) {
    const double keep = x[i];
    x[i] = keep + eps;
    double fp = f(static_cast<Graph<double>*>(nullptr), input).data()[0];
    x[i] = keep - eps;
    double fm = f(static_cast<Graph<double>*>(nullptr), input).data()[0];
    x[i] = keep;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic[std::size_t(i)];
    const double den = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / den;
    ++rep.checked;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = i;
      rep.worst_analytic = a;
      rep.worst_numeric = numeric;
    }
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

}  // namespace cseg
