#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

#if defined(__GLIBC__) || defined(__gnu_linux__)
#include <malloc.h>
#endif

namespace cseg {

/// Training allocates and frees batch-sized tensor buffers continuously; with
/// glibc defaults every multi-megabyte block is a fresh mmap plus page-fault
/// storm. Raising the mmap/trim thresholds keeps those blocks on the heap for
/// reuse. Call once at process start from long-running entry points.
inline void tune_allocator() {
#if defined(M_MMAP_THRESHOLD)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

inline int max_threads() {
  static const int n = [] {
    if (const char* e = std::getenv("CSEG_THREADS")) {
      int v = std::atoi(e);
      if (v >= 1) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc ? int(hc) : 1;
  }();
  return n;
}

/// Runs fn(begin, end) over disjoint chunks of [0, n). Every index is
/// processed by exactly one invocation and each element's computation is
/// self-contained, so results are identical for any thread count.
/// `grain` is the minimum number of indices worth a thread.
template <class F>
void parallel_for(std::int64_t n, std::int64_t grain, F&& fn) {
  if (n <= 0) return;
  if (grain < 1) grain = 1;
  std::int64_t want = n / grain;
  int nt = int(std::min<std::int64_t>(max_threads(), std::max<std::int64_t>(1, want)));
  if (nt <= 1) {
    fn(std::int64_t(0), n);
    return;
  }
  std::int64_t chunk = (n + nt - 1) / nt;
  std::vector<std::thread> workers;
  workers.reserve(nt - 1);
  for (int t = 1; t < nt; ++t) {
    std::int64_t b = t * chunk;
    std::int64_t e = std::min(n, b + chunk);
    if (b < e) workers.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::int64_t(0), std::min(chunk, n));
  for (auto& w : workers) w.join();
}

}  // namespace cseg
