#pragma once

#include <cstddef>
#include <functional>

namespace deflect::parallel {

// Worker count: DEFLECT_THREADS if set (must be a positive integer), else
// the hardware concurrency.
std::size_t thread_count();

// Runs fn(i) for i in [0, n) on up to `threads` workers (0 = thread_count()).
// Indices are split into contiguous static blocks, so any per-index output is
// independent of the thread count. The exception from the lowest failing
// index is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  std::size_t threads = 0);

}  // namespace deflect::parallel
