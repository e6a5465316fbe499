#pragma once

#include <cstddef>
#include <functional>

namespace caps {

// Worker budget for batch-axis parallelism. Resolution order:
// set_max_workers() value if nonzero, else CAPS_THREADS, else
// hardware_concurrency. Reproducible runs set it to 1 so every
// accumulation happens sequentially.
void set_max_workers(int n);
int max_workers();

// Splits [0, n) into contiguous chunks, one worker each, and joins before
// returning. Chunk boundaries depend only on n and the worker count, so a
// fixed worker count gives bitwise-identical results run to run.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& chunk_fn);

}  // namespace caps
