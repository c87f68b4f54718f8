// Copyright (c) 2026 CAR contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace car {

/// Worker cap: CAR_THREADS when set, else hardware concurrency.
inline int thread_budget() {
  static const int cap = [] {
    if (const char* env = std::getenv("CAR_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
  }();
  return cap;
}

namespace detail {
inline bool& in_worker() {
  thread_local bool flag = false;
  return flag;
}
}  // namespace detail

/// Runs fn(begin, end) over a static partition of [0, n). Each index is owned
/// by exactly one worker, so results never depend on the thread count.
/// Nested calls run inline to avoid oversubscription.
inline void parallel_for(long n, const std::function<void(long, long)>& fn) {
  if (n <= 0) return;
  int workers = detail::in_worker() ? 1 : std::min<long>(thread_budget(), n);
  if (workers <= 1) {
    fn(0, n);
    return;
  }
  long chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(size_t(workers));
  for (int w = 0; w < workers; ++w) {
    long b = w * chunk;
    long e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] {
      detail::in_worker() = true;
      fn(b, e);
      detail::in_worker() = false;
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace car
