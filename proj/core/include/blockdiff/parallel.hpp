#pragma once

#include <functional>

namespace blockdiff {

// BLOCKDIFF_THREADS, default 1.
int thread_count_from_env();

// Runs f(0..n-1) on up to `threads` workers. Callers store results by index
// and aggregate in index order afterwards, so outcomes never depend on
// scheduling.
void parallel_for(int n, int threads, const std::function<void(int)>& f);

}  // namespace blockdiff
