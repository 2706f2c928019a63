#pragma once

#include <cstddef>
#include <functional>

namespace wardrisk {

// Thread count resolution: explicit request, else WARDRISK_THREADS, else
// hardware concurrency.
unsigned resolve_threads(unsigned requested);

// Runs f(i) for i in [0, n) on up to `threads` workers with static chunking.
// f must only write state owned by index i; reductions happen after the join
// in index order, so results are identical for any thread count.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& f);

}  // namespace wardrisk
