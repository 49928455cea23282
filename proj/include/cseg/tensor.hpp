#pragma once

/// Dense N×C×H×W tensors with taped reverse-mode differentiation.
///
/// A Tensor<T> is a cheap handle onto shared storage (values plus an optional
/// gradient buffer of identical shape). Differentiable operations execute
/// eagerly and, when given a Graph, record a backward closure on its tape.
/// One backward pass replays the tape in reverse, visiting each recorded
/// operation exactly once. Gradients of intermediate results are reset at the
/// start of every backward pass; gradients of leaves (tensors never produced
/// by a recorded operation, i.e. parameters and inputs) accumulate across
/// passes until explicitly zeroed.
///
/// T selects the element precision: float for training, double for gradient
/// checking.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cseg/parallel.hpp"
#include "cseg/rng.hpp"

namespace cseg {

struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
/// Incompatible tensor shapes or invalid axes.
struct shape_error : error {
  using error::error;
};
/// NaN/Inf produced by a forward or backward pass; always fatal.
struct numeric_error : error {
  using error::error;
};
struct io_error : error {
  using error::error;
};
/// Bad user-supplied configuration (CLI exit code 1).
struct config_error : error {
  using error::error;
};

/// Clamp floor applied to every log and division argument.
constexpr double kEps = 1e-7;

struct Shape {
  std::int64_t n = 1, c = 1, h = 1, w = 1;

  std::int64_t numel() const { return n * c * h * w; }
  bool operator==(const Shape& o) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw shape_error(msg);
}

template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s, bool requires_grad = false) {
    Tensor t;
    t.p_ = std::make_shared<Payload>();
    t.p_->shape = s;
    t.p_->v.assign(std::size_t(s.numel()), T(0));
    if (requires_grad) t.set_requires_grad(true);
    return t;
  }

  static Tensor full(Shape s, T value, bool requires_grad = false) {
    Tensor t = zeros(s, requires_grad);
    for (auto& x : t.p_->v) x = value;
    return t;
  }

  static Tensor from(Shape s, std::vector<T> values, bool requires_grad = false) {
    require(std::int64_t(values.size()) == s.numel(),
            "tensor data size " + std::to_string(values.size()) +
                " does not match shape " + s.str());
    Tensor t;
    t.p_ = std::make_shared<Payload>();
    t.p_->shape = s;
    t.p_->v = std::move(values);
    if (requires_grad) t.set_requires_grad(true);
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return full(Shape{1, 1, 1, 1}, value, requires_grad);
  }

  static Tensor randn(Shape s, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    Tensor t = zeros(s, requires_grad);
    for (auto& x : t.p_->v) x = T(rng.normal() * stddev);
    return t;
  }

  static Tensor randu(Shape s, Rng& rng, double lo, double hi, bool requires_grad = false) {
    Tensor t = zeros(s, requires_grad);
    for (auto& x : t.p_->v) x = T(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return bool(p_); }
  Shape shape() const { return p_->shape; }
  std::int64_t numel() const { return p_->shape.numel(); }

  T* data() { return p_->v.data(); }
  const T* data() const { return p_->v.data(); }
  const std::vector<T>& values() const { return p_->v; }

  T& at(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) {
    return p_->v[index(n, c, y, x)];
  }
  T at(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) const {
    return p_->v[index(n, c, y, x)];
  }

  std::int64_t index(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) const {
    const Shape& s = p_->shape;
    return ((n * s.c + c) * s.h + y) * s.w + x;
  }

  bool requires_grad() const { return p_ && p_->requires_grad; }

  void set_requires_grad(bool rg) {
    p_->requires_grad = rg;
    if (rg && p_->g.size() != p_->v.size()) p_->g.assign(p_->v.size(), T(0));
  }

  T* grad() { return p_->g.data(); }
  const T* grad() const { return p_->g.data(); }

  void zero_grad() {
    for (auto& x : p_->g) x = T(0);
  }

  /// Deep copy of the values only; the copy does not require grad.
  Tensor clone() const {
    Tensor t;
    t.p_ = std::make_shared<Payload>();
    t.p_->shape = p_->shape;
    t.p_->v = p_->v;
    return t;
  }

  /// True when both handles refer to the same storage.
  bool same_storage(const Tensor& o) const { return p_ == o.p_; }

 private:
  struct Payload {
    Shape shape;
    std::vector<T> v;
    std::vector<T> g;
    bool requires_grad = false;
  };
  std::shared_ptr<Payload> p_;
};

template <class T>
void ensure_finite(const Tensor<T>& t, const char* what) {
  const T* p = t.data();
  const std::int64_t n = t.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(double(p[i])))
      throw numeric_error(std::string(what) + ": non-finite element at index " +
                          std::to_string(i));
  }
}

/// Ordered record of the differentiable operations of one forward pass.
///
/// backward() may be called repeatedly; each pass re-derives intermediate
/// gradients from scratch and adds the same contributions into leaf
/// gradients, so two passes over the same loss exactly double every leaf
/// gradient.
template <class T>
class Graph {
 public:
  void record(Tensor<T> output, std::function<void()> backward_fn) {
    nodes_.push_back(Node{std::move(output), std::move(backward_fn)});
  }

  std::size_t num_nodes() const { return nodes_.size(); }

  void backward(Tensor<T> loss) {
    require(loss.defined() && loss.numel() == 1, "backward: loss must be a scalar tensor");
    if (!loss.requires_grad())
      throw error("backward: loss does not depend on any tensor that requires grad");
    for (auto& n : nodes_) n.out.zero_grad();
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
  }

 private:
  struct Node {
    Tensor<T> out;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise operations
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
Tensor<T> make_output(Graph<T>* g, Shape s, bool any_input_rg) {
  Tensor<T> out = Tensor<T>::zeros(s);
  if (g && any_input_rg) out.set_requires_grad(true);
  return out;
}

template <class T>
T clamp_den(T d) {
  // Sign-preserving floor at kEps; an exact zero is treated as positive.
  if (d >= T(kEps) || d <= T(-kEps)) return d;
  return d < T(0) ? T(-kEps) : T(kEps);
}

}  // namespace detail

/// out = a (+|-|*|/) b, equal shapes. Division clamps |denominator| at kEps
/// (zero gradient to the denominator where the clamp engaged).
template <class T, class Fwd, class Bwd>
Tensor<T> binary_op(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b, const char* name,
                    Fwd fwd, Bwd bwd) {
  require(a.shape() == b.shape(), std::string(name) + ": shape mismatch " +
                                      a.shape().str() + " vs " + b.shape().str());
  const std::int64_t n = a.numel();
  Tensor<T> out = detail::make_output(g, a.shape(), a.requires_grad() || b.requires_grad());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  ensure_finite(out, name);
  if (g && out.requires_grad()) {
    Tensor<T> ac = a, bc = b, oc = out;
    g->record(out, [ac, bc, oc, n, bwd]() mutable {
      const T* go = oc.grad();
      const T* pa = ac.data();
      const T* pb = bc.data();
      T* ga = ac.requires_grad() ? ac.grad() : nullptr;
      T* gb = bc.requires_grad() ? bc.grad() : nullptr;
      for (std::int64_t i = 0; i < n; ++i) bwd(go[i], pa[i], pb[i], ga ? ga + i : nullptr,
                                              gb ? gb + i : nullptr);
    });
  }
  return out;
}

template <class T>
Tensor<T> add(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      g, a, b, "add", [](T x, T y) { return x + y; },
      [](T go, T, T, T* ga, T* gb) {
        if (ga) *ga += go;
        if (gb) *gb += go;
      });
}

template <class T>
Tensor<T> sub(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      g, a, b, "sub", [](T x, T y) { return x - y; },
      [](T go, T, T, T* ga, T* gb) {
        if (ga) *ga += go;
        if (gb) *gb -= go;
      });
}

template <class T>
Tensor<T> mul(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      g, a, b, "mul", [](T x, T y) { return x * y; },
      [](T go, T x, T y, T* ga, T* gb) {
        if (ga) *ga += go * y;
        if (gb) *gb += go * x;
      });
}

template <class T>
Tensor<T> div(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      g, a, b, "div", [](T x, T y) { return x / detail::clamp_den(y); },
      [](T go, T x, T y, T* ga, T* gb) {
        T yc = detail::clamp_den(y);
        if (ga) *ga += go / yc;
        if (gb && (y >= T(kEps) || y <= T(-kEps))) *gb -= go * x / (yc * yc);
      });
}

/// Per-element num/den with the convention that an exactly-zero denominator
/// yields 1 (and passes no gradient). Used by the soft Jaccard ratio where
/// blank target plus blank prediction must score 1.
template <class T>
Tensor<T> div_or_one(Graph<T>* g, const Tensor<T>& num, const Tensor<T>& den) {
  return binary_op(
      g, num, den, "div_or_one",
      [](T x, T y) { return y == T(0) ? T(1) : x / y; },
      [](T go, T x, T y, T* ga, T* gb) {
        if (y == T(0)) return;
        if (ga) *ga += go / y;
        if (gb) *gb -= go * x / (y * y);
      });
}

template <class T, class Fwd, class Bwd>
Tensor<T> unary_op(Graph<T>* g, const Tensor<T>& a, const char* name, Fwd fwd, Bwd bwd) {
  const std::int64_t n = a.numel();
  Tensor<T> out = detail::make_output(g, a.shape(), a.requires_grad());
  const T* pa = a.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  ensure_finite(out, name);
  if (g && out.requires_grad()) {
    Tensor<T> ac = a, oc = out;
    g->record(out, [ac, oc, n, bwd]() mutable {
      const T* go = oc.grad();
      const T* po = oc.data();
      const T* pa = ac.data();
      T* ga = ac.grad();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += bwd(go[i], pa[i], po[i]);
    });
  }
  return out;
}

template <class T>
Tensor<T> add(Graph<T>* g, const Tensor<T>& a, T s) {
  return unary_op(
      g, a, "add_scalar", [s](T x) { return x + s; },
      [](T go, T, T) { return go; });
}

template <class T>
Tensor<T> mul(Graph<T>* g, const Tensor<T>& a, T s) {
  return unary_op(
      g, a, "mul_scalar", [s](T x) { return x * s; },
      [s](T go, T, T) { return go * s; });
}

/// s - a
template <class T>
Tensor<T> sub(Graph<T>* g, T s, const Tensor<T>& a) {
  return unary_op(
      g, a, "rsub_scalar", [s](T x) { return s - x; },
      [](T go, T, T) { return -go; });
}

/// Natural log of max(x, kEps); clamped region passes no gradient.
template <class T>
Tensor<T> log(Graph<T>* g, const Tensor<T>& a) {
  return unary_op(
      g, a, "log", [](T x) { return std::log(x < T(kEps) ? T(kEps) : x); },
      [](T go, T x, T) { return x < T(kEps) ? T(0) : go / x; });
}

template <class T>
Tensor<T> exp(Graph<T>* g, const Tensor<T>& a) {
  return unary_op(
      g, a, "exp", [](T x) { return std::exp(x); },
      [](T go, T, T y) { return go * y; });
}

template <class T>
Tensor<T> sigmoid(Graph<T>* g, const Tensor<T>& a) {
  return unary_op(
      g, a, "sigmoid",
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T go, T, T y) { return go * y * (T(1) - y); });
}

template <class T>
Tensor<T> relu(Graph<T>* g, const Tensor<T>& a) {
  return unary_op(
      g, a, "relu", [](T x) { return x > T(0) ? x : T(0); },
      [](T go, T x, T) { return x > T(0) ? go : T(0); });
}

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
template <class T>
Tensor<T> clamp(Graph<T>* g, const Tensor<T>& a, T lo, T hi) {
  return unary_op(
      g, a, "clamp",
      [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](T go, T x, T) { return (x > lo && x < hi) ? go : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class Reduce { sum, mean };
enum class Axes { all, chw };

template <class T>
Tensor<T> sum_all(Graph<T>* g, const Tensor<T>& a) {
  const std::int64_t n = a.numel();
  Tensor<T> out = detail::make_output(g, Shape{1, 1, 1, 1}, a.requires_grad());
  const T* pa = a.data();
  T acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) acc += pa[i];
  out.data()[0] = acc;
  ensure_finite(out, "sum");
  if (g && out.requires_grad()) {
    Tensor<T> ac = a, oc = out;
    g->record(out, [ac, oc, n]() mutable {
      T go = oc.grad()[0];
      T* ga = ac.grad();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += go;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean_all(Graph<T>* g, const Tensor<T>& a) {
  const std::int64_t n = a.numel();
  Tensor<T> out = detail::make_output(g, Shape{1, 1, 1, 1}, a.requires_grad());
  const T* pa = a.data();
  T acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) acc += pa[i];
  out.data()[0] = acc / T(n);
  ensure_finite(out, "mean");
  if (g && out.requires_grad()) {
    Tensor<T> ac = a, oc = out;
    g->record(out, [ac, oc, n]() mutable {
      T go = oc.grad()[0] / T(n);
      T* ga = ac.grad();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += go;
    });
  }
  return out;
}

/// Per-sample sum over (C, H, W); output shape (N, 1, 1, 1).
template <class T>
Tensor<T> sum_chw(Graph<T>* g, const Tensor<T>& a) {
  Shape s = a.shape();
  const std::int64_t per = s.c * s.h * s.w;
  Tensor<T> out = detail::make_output(g, Shape{s.n, 1, 1, 1}, a.requires_grad());
  const T* pa = a.data();
  T* po = out.data();
  for (std::int64_t b = 0; b < s.n; ++b) {
    T acc = T(0);
    const T* p = pa + b * per;
    for (std::int64_t i = 0; i < per; ++i) acc += p[i];
    po[b] = acc;
  }
  ensure_finite(out, "sum_chw");
  if (g && out.requires_grad()) {
    Tensor<T> ac = a, oc = out;
    g->record(out, [ac, oc, per, n = s.n]() mutable {
      const T* go = oc.grad();
      T* ga = ac.grad();
      for (std::int64_t b = 0; b < n; ++b) {
        T gv = go[b];
        T* p = ga + b * per;
        for (std::int64_t i = 0; i < per; ++i) p[i] += gv;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> reduce(Graph<T>* g, Reduce op, const Tensor<T>& a, Axes axes) {
  if (axes == Axes::all) return op == Reduce::sum ? sum_all(g, a) : mean_all(g, a);
  Tensor<T> s = sum_chw(g, a);
  if (op == Reduce::sum) return s;
  Shape sh = a.shape();
  return mul(g, s, T(1) / T(sh.c * sh.h * sh.w));
}

// ---------------------------------------------------------------------------
// Structural operations
// ---------------------------------------------------------------------------

/// Channel concatenation; a occupies channels [0, C_a).
template <class T>
Tensor<T> concat_channels(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
  Shape sa = a.shape(), sb = b.shape();
  require(sa.n == sb.n && sa.h == sb.h && sa.w == sb.w,
          "concat_channels: batch/spatial mismatch " + sa.str() + " vs " + sb.str());
  Shape so{sa.n, sa.c + sb.c, sa.h, sa.w};
  Tensor<T> out = detail::make_output(g, so, a.requires_grad() || b.requires_grad());
  const std::int64_t plane = sa.h * sa.w;
  for (std::int64_t n = 0; n < sa.n; ++n) {
    std::copy_n(a.data() + n * sa.c * plane, sa.c * plane,
                out.data() + n * so.c * plane);
    std::copy_n(b.data() + n * sb.c * plane, sb.c * plane,
                out.data() + n * so.c * plane + sa.c * plane);
  }
  if (g && out.requires_grad()) {
    Tensor<T> ac = a, bc = b, oc = out;
    g->record(out, [ac, bc, oc, sa, sb, so, plane]() mutable {
      const T* go = oc.grad();
      for (std::int64_t n = 0; n < sa.n; ++n) {
        if (ac.requires_grad()) {
          T* ga = ac.grad() + n * sa.c * plane;
          const T* src = go + n * so.c * plane;
          for (std::int64_t i = 0; i < sa.c * plane; ++i) ga[i] += src[i];
        }
        if (bc.requires_grad()) {
          T* gb = bc.grad() + n * sb.c * plane;
          const T* src = go + n * so.c * plane + sa.c * plane;
          for (std::int64_t i = 0; i < sb.c * plane; ++i) gb[i] += src[i];
        }
      }
    });
  }
  return out;
}

/// Channels [c0, c1) of a.
template <class T>
Tensor<T> slice_channels(Graph<T>* g, const Tensor<T>& a, std::int64_t c0, std::int64_t c1) {
  Shape sa = a.shape();
  require(0 <= c0 && c0 < c1 && c1 <= sa.c, "slice_channels: bad channel range");
  Shape so{sa.n, c1 - c0, sa.h, sa.w};
  Tensor<T> out = detail::make_output(g, so, a.requires_grad());
  const std::int64_t plane = sa.h * sa.w;
  for (std::int64_t n = 0; n < sa.n; ++n)
    std::copy_n(a.data() + (n * sa.c + c0) * plane, so.c * plane,
                out.data() + n * so.c * plane);
  if (g && out.requires_grad()) {
    Tensor<T> ac = a, oc = out;
    g->record(out, [ac, oc, sa, so, c0, plane]() mutable {
      const T* go = oc.grad();
      T* ga = ac.grad();
      for (std::int64_t n = 0; n < sa.n; ++n) {
        T* dst = ga + (n * sa.c + c0) * plane;
        const T* src = go + n * so.c * plane;
        for (std::int64_t i = 0; i < so.c * plane; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

/// Gathers the listed batch items (rows may repeat).
template <class T>
Tensor<T> slice_batch(Graph<T>* g, const Tensor<T>& a, std::vector<std::int64_t> idx) {
  Shape sa = a.shape();
  require(!idx.empty(), "slice_batch: empty index list");
  for (auto i : idx) require(0 <= i && i < sa.n, "slice_batch: index out of range");
  Shape so{std::int64_t(idx.size()), sa.c, sa.h, sa.w};
  Tensor<T> out = detail::make_output(g, so, a.requires_grad());
  const std::int64_t per = sa.c * sa.h * sa.w;
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::copy_n(a.data() + idx[k] * per, per, out.data() + std::int64_t(k) * per);
  if (g && out.requires_grad()) {
    Tensor<T> ac = a, oc = out;
    g->record(out, [ac, oc, idx = std::move(idx), per]() mutable {
      const T* go = oc.grad();
      T* ga = ac.grad();
      for (std::size_t k = 0; k < idx.size(); ++k) {
        T* dst = ga + idx[k] * per;
        const T* src = go + std::int64_t(k) * per;
        for (std::int64_t i = 0; i < per; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

/// Softmax over the channel axis at every (n, y, x) position.
template <class T>
Tensor<T> softmax_channels(Graph<T>* g, const Tensor<T>& a) {
  Shape s = a.shape();
  Tensor<T> out = detail::make_output(g, s, a.requires_grad());
  const std::int64_t plane = s.h * s.w;
  const T* pa = a.data();
  T* po = out.data();
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t p = 0; p < plane; ++p) {
      const std::int64_t base = n * s.c * plane + p;
      T mx = pa[base];
      for (std::int64_t c = 1; c < s.c; ++c) mx = std::max(mx, pa[base + c * plane]);
      T z = T(0);
      for (std::int64_t c = 0; c < s.c; ++c) {
        T e = std::exp(pa[base + c * plane] - mx);
        po[base + c * plane] = e;
        z += e;
      }
      for (std::int64_t c = 0; c < s.c; ++c) po[base + c * plane] /= z;
    }
  }
  ensure_finite(out, "softmax");
  if (g && out.requires_grad()) {
    Tensor<T> ac = a, oc = out;
    g->record(out, [ac, oc, s, plane]() mutable {
      const T* go = oc.grad();
      const T* po = oc.data();
      T* ga = ac.grad();
      for (std::int64_t n = 0; n < s.n; ++n) {
        for (std::int64_t p = 0; p < plane; ++p) {
          const std::int64_t base = n * s.c * plane + p;
          T dot = T(0);
          for (std::int64_t c = 0; c < s.c; ++c)
            dot += po[base + c * plane] * go[base + c * plane];
          for (std::int64_t c = 0; c < s.c; ++c)
            ga[base + c * plane] +=
                po[base + c * plane] * (go[base + c * plane] - dot);
        }
      }
    });
  }
  return out;
}

}  // namespace cseg
