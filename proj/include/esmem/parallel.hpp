#pragma once
// Bounded fan-out helper for provider-heavy loops. Work items are claimed
// from an atomic counter so result slots can be written by index, keeping
// aggregation order-independent and deterministic.

#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace esmem {

// Runs fn(i) for i in [0, count) on up to `jobs` threads. The first
// exception thrown by fn stops new work and is rethrown on the caller.
template <typename Fn>
void parallel_for(std::size_t count, int jobs, Fn&& fn) {
  if (count == 0) return;
  if (jobs < 1) jobs = 1;
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(jobs), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }

  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
        next.store(count);  // stop claiming new work
        return;
      }
    }
  };

  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace esmem
