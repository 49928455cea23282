#pragma once

/// Adam with the bias-corrected update and a step-decay learning-rate
/// schedule.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cseg/tensor.hpp"

namespace cseg {

struct AdamConfig {
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// lr(epoch) = base_lr * drop_factor^floor(epoch / drop_every).
struct LrSchedule {
  double base_lr = 1e-3;
  double drop_factor = 0.1;
  int drop_every = 40;

  double at(int epoch) const {
    require(epoch >= 0, "lr schedule: negative epoch");
    int drops = drop_every > 0 ? epoch / drop_every : 0;
    double lr = base_lr;
    for (int i = 0; i < drops; ++i) lr *= drop_factor;
    return lr;
  }
};

/// Owns first/second-moment state for a fixed set of named parameters.
/// step() reads each parameter's accumulated gradient and applies
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<std::pair<std::string, Tensor<T>>> params, AdamConfig cfg = {})
      : cfg_(cfg) {
    slots_.reserve(params.size());
    for (auto& [name, p] : params) {
      require(p.requires_grad(), "Adam: parameter '" + name + "' does not require grad");
      slots_.push_back(Slot{name, p, Tensor<T>::zeros(p.shape()), Tensor<T>::zeros(p.shape())});
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
    for (auto& s : slots_) {
      const std::int64_t n = s.p.numel();
      const T* grad = s.p.grad();
      T* pv = s.p.data();
      T* m = s.m.data();
      T* v = s.v.data();
      for (std::int64_t i = 0; i < n; ++i) {
        const T gi = grad[i];
        if (!std::isfinite(double(gi)))
          throw numeric_error("Adam: non-finite gradient in '" + s.name + "'");
        m[i] = b1 * m[i] + (T(1) - b1) * gi;
        v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
        const double mhat = double(m[i]) / bc1;
        const double vhat = double(v[i]) / bc2;
        pv[i] = T(double(pv[i]) - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.p.zero_grad();
  }

  std::int64_t step_count() const { return t_; }
  void set_step_count(std::int64_t t) { t_ = t; }
  const AdamConfig& config() const { return cfg_; }

  /// Moment tensors exposed for checkpointing, keyed by parameter name.
  std::vector<std::pair<std::string, Tensor<T>>> first_moments() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (auto& s : slots_) out.emplace_back(s.name, s.m);
    return out;
  }
  std::vector<std::pair<std::string, Tensor<T>>> second_moments() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (auto& s : slots_) out.emplace_back(s.name, s.v);
    return out;
  }

 private:
  struct Slot {
    std::string name;
    Tensor<T> p, m, v;
  };
  std::vector<Slot> slots_;
  std::int64_t t_ = 0;
  AdamConfig cfg_;
};

}  // namespace cseg
