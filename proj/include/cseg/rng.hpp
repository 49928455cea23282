#pragma once

#include <cmath>
#include <cstdint>
#include <utility>

namespace cseg {

/// Deterministic 64-bit PRNG (splitmix64 recurrence).
///
/// State advances by the golden-ratio increment 0x9E3779B97F4A7C15 and each
/// output is finalized with the 0xBF58476D1CE4E5B9 / 0x94D049BB133111EB
/// xor-multiply mix. All randomness in the project (weights, corpora, splits,
/// batch order) flows through this generator, so every run reproduces
/// bit-for-bit independent of platform or standard-library version.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// One Box-Muller draw per call; no cached second value, so the stream
  /// position after n calls is always 2n uniforms.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  /// Uniform integer in [0, n). Modulo bias is negligible for n << 2^64.
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  bool bernoulli(double p) { return uniform() < p; }

  /// Child-stream seed k of a parent seed. Documented derivation:
  /// first splitmix64 output of (seed XOR 0xD1B54A32D192ED03 * (k + 1)).
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    Rng r(seed ^ (0xD1B54A32D192ED03ull * (stream + 1)));
    return r.next_u64();
  }

 private:
  std::uint64_t state_;
};

/// Fisher-Yates shuffle driven by Rng; iteration order is fixed so results
/// depend only on the seed.
template <class It>
void shuffle(It begin, It end, Rng& rng) {
  auto n = end - begin;
  for (auto i = n - 1; i > 0; --i) {
    auto j = rng.below(std::uint64_t(i) + 1);
    std::swap(begin[i], begin[j]);
  }
}

}  // namespace cseg
