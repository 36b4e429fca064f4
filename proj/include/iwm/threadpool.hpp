#pragma once

#include <cstdint>
#include <functional>

namespace iwm {

// Number of workers for data-parallel loops. Capped by IWM_NUM_WORKERS.
int num_workers();

// Runs fn(i) for i in [0, n). Work is split into fixed-size chunks whose
// boundaries do not depend on the worker count, and no reduction crosses a
// chunk, so results are bit-identical for any number of workers.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn_range);

} // namespace iwm
