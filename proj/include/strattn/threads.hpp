// SPDX-License-Identifier: Apache-2.0
//
// Worker cap and a deterministic parallel loop. STRATT_THREADS bounds the
// worker count (default 1). parallel_for may only be used where iterations
// write disjoint outputs, so results are bit-identical at any thread count.

#pragma once

#include <cstdlib>
#include <thread>
#include <vector>

namespace strattn {

inline int max_threads() {
  static const int cached = [] {
    const char* env = std::getenv("STRATT_THREADS");
    if (!env) return 1;
    const long v = std::strtol(env, nullptr, 10);
    if (v < 1) return 1;
    const long hw = long(std::thread::hardware_concurrency());
    return int(hw > 0 && v > hw ? hw : v);
  }();
  return cached;
}

template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const int workers = max_threads();
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t count = std::min<std::size_t>(std::size_t(workers), n);
  std::vector<std::thread> pool;
  pool.reserve(count);
  for (std::size_t w = 0; w < count; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += count) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace strattn
