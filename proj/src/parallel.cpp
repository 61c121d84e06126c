#include "mlmbic/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mlmbic {

unsigned worker_count(unsigned requested, std::size_t tasks) {
  unsigned n = requested;
  if (n == 0) {
    if (const char* env = std::getenv("MLMBIC_THREADS")) {
      unsigned v = 0;
      auto [ptr, ec] = std::from_chars(env, env + std::strlen(env), v);
      if (ec == std::errc() && v > 0) n = v;
    }
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  if (tasks < n) n = static_cast<unsigned>(tasks);
  return std::max(1u, n);
}

void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  threads = worker_count(threads, n);
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace mlmbic
