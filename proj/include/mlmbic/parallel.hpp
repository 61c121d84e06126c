#pragma once

#include <cstddef>
#include <functional>

namespace mlmbic {

/// Worker count: `requested` if nonzero, else MLMBIC_THREADS if set, else
/// hardware concurrency. Never more than `tasks`, never less than 1.
unsigned worker_count(unsigned requested, std::size_t tasks);

/// Runs fn(0..n-1) on up to `threads` workers. Each index runs exactly once;
/// the first exception thrown by any task is rethrown after all workers join.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn);

}  // namespace mlmbic
