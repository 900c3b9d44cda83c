// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace prefprobe {

/// Calls body(i) for i in [0, n) on at most `max_workers` threads. The body
/// must not throw and must write only to slot i of its outputs, which keeps
/// results independent of scheduling.
template <class Body>
void parallel_for(std::size_t n, std::size_t max_workers, Body&& body) {
  const std::size_t workers = std::min(n, std::max<std::size_t>(max_workers, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) body(i);
    });
  }
}

}  // namespace prefprobe
