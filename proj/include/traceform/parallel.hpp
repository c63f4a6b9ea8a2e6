#pragma once

#include <cstddef>
#include <functional>

namespace traceform {

/// `requested` > 0 wins; otherwise TRACEFORM_THREADS; otherwise 1.
int resolve_threads(int requested);

/// Runs fn(i) for i in [0, n) on `threads` workers with a static contiguous partition.
/// The first exception (by index) is rethrown after all workers finish.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace traceform
