#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace msrn {

namespace detail {
inline std::atomic<int>& worker_setting() {
  static std::atomic<int> workers{1};
  return workers;
}
}  // namespace detail

// Number of threads used by sample-parallel kernels. Results never depend on
// this value: every reduction runs in a fixed order after the parallel phase.
inline void set_worker_count(int workers) { detail::worker_setting() = std::max(1, workers); }
inline int worker_count() { return detail::worker_setting().load(); }

// Runs body(i) for i in [0, n). Each index is handled by exactly one thread,
// so bodies that only write to per-index state are race-free.
template <typename Body>
void parallel_for(std::size_t n, Body&& body) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(worker_count()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace msrn
