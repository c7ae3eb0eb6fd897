#pragma once

#include <cstddef>
#include <functional>

namespace segnet {

/// Worker count used by the convolution kernels. Results are bitwise
/// reproducible for a fixed count; changing it may change rounding.
void set_num_threads(int threads);
int num_threads();

/// Reads SEGNET_THREADS; returns `fallback` when unset or malformed.
int threads_from_env(int fallback = 1);

/// Splits [0, count) into contiguous chunks, one per worker, and runs
/// `body(begin, end)` on each. Runs inline when one worker is configured.
void parallel_for(std::size_t count, std::size_t min_chunk,
                  const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace segnet
