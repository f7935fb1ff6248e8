#pragma once

#include <cstddef>
#include <functional>

namespace imf {

/// Worker count: IMF_THREADS if set (>= 1), otherwise the hardware thread count.
int worker_threads();

/// Runs fn(begin, end) over a static partition of [0, n). Each index belongs
/// to exactly one call, so writes to per-index slots are race-free and the
/// result never depends on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace imf
