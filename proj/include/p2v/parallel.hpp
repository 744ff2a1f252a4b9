#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace p2v {

// Calls fn(i) for i in [0, n), item i on worker i % workers. The first
// exception (by worker) is rethrown after all workers join.
template <class Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  const auto w_count = std::min(static_cast<std::size_t>(std::max(1, workers)), n);
  if (w_count <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(w_count);
  for (std::size_t w = 0; w < w_count; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += w_count) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace p2v
