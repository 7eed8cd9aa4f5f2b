#pragma once

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace qrobust {

// Worker-thread cap: QROBUST_THREADS when set, else 1 (callers that want
// hardware concurrency opt in explicitly).
inline int worker_thread_cap() {
  if (const char* env = std::getenv("QROBUST_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  return 1;
}

// Runs fn(start, end) over contiguous chunks of [0, n) on up to
// worker_thread_cap() threads. Each chunk owns its output slots, so results
// are deterministic regardless of scheduling.
template <typename Fn>
void parallel_chunks(int64_t n, Fn&& fn) {
  const int threads = std::min<int64_t>(worker_thread_cap(), n > 0 ? n : 1);
  if (threads <= 1) {
    fn(static_cast<int64_t>(0), n);
    return;
  }
  std::vector<std::thread> pool;
  const int64_t chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const int64_t lo = t * chunk;
    const int64_t hi = std::min<int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace qrobust
