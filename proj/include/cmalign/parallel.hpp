#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace cmalign {

// Thread cap: CMALIGN_THREADS if set, otherwise all hardware threads.
inline int max_threads() {
  static const int cached = [] {
    if (const char* env = std::getenv("CMALIGN_THREADS")) {
      int n = std::atoi(env);
      if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return cached;
}

// Splits [0, n) into contiguous chunks, one worker per chunk. Results are
// bitwise independent of the thread count as long as fn writes disjoint
// outputs per index, which is the contract at every call site.
inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  int threads = max_threads();
  if (threads <= 1 || n < 64) {
    fn(0, n);
    return;
  }
  int workers = static_cast<int>(std::min<int64_t>(threads, n));
  int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    int64_t lo = w * chunk;
    int64_t hi = std::min<int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace cmalign
