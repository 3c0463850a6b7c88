#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace caps {

/// Runs fn(begin, end) over [0, n) split into fixed-size blocks, using up to
/// `threads` workers. Block boundaries depend only on n and block, never on the
/// thread count, so block-local computations give identical results for any
/// level of parallelism. The first exception (by block index) is rethrown.
template <class Fn>
void parallel_blocks(std::size_t n, std::size_t block, unsigned threads, Fn&& fn) {
  if (n == 0) return;
  block = std::max<std::size_t>(block, 1);
  const std::size_t n_blocks = (n + block - 1) / block;
  const std::size_t workers = std::min<std::size_t>(std::max(threads, 1U), n_blocks);
  if (workers == 1) {
    for (std::size_t b = 0; b < n_blocks; ++b) fn(b * block, std::min(n, (b + 1) * block));
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::size_t error_block = n_blocks;
  std::exception_ptr error;
  auto work = [&] {
    for (;;) {
      const std::size_t b = next.fetch_add(1);
      if (b >= n_blocks) return;
      try {
        fn(b * block, std::min(n, (b + 1) * block));
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (b < error_block) {
          error_block = b;
          error = std::current_exception();
        }
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
    work();
  }
  if (error) std::rethrow_exception(error);
}

/// Calls fn(i) for every i in [0, n) with at most `limit` calls in flight.
template <class Fn>
void bounded_for_each(std::size_t n, unsigned limit, Fn&& fn) {
  parallel_blocks(n, 1, limit, [&](std::size_t begin, std::size_t) { fn(begin); });
}

}  // namespace caps
