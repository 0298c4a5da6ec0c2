#include "msy/common.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace msy {

namespace {

std::atomic<int> g_thread_override{0};

int detect_threads() {
  if (const char* env = std::getenv("MSY_THREADS")) {
    int v = std::atoi(env);
    if (v > 0) return v;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace

int max_threads() {
  int o = g_thread_override.load(std::memory_order_relaxed);
  return o > 0 ? o : detect_threads();
}

void set_max_threads(int n) { g_thread_override.store(n, std::memory_order_relaxed); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  int workers = std::min<int64_t>(max_threads(), n);
  if (workers <= 1) {
    fn(0, n);
    return;
  }
  int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (int w = 1; w < workers; ++w) {
    int64_t b = w * chunk;
    int64_t e = std::min<int64_t>(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(0, std::min<int64_t>(n, chunk));
  for (auto& t : pool) t.join();
}

}  // namespace msy
