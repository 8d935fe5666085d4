#pragma once

#include <functional>

#include "sscan/common.hpp"

namespace sscan {

// Global worker count. Resolution order: explicit set_threads() call,
// SSCAN_THREADS environment variable, hardware concurrency.
void set_threads(int n);
int get_threads();

// Static block partition of [0, n) over the configured worker count.
// Work items must write disjoint outputs; the partition never feeds a
// cross-thread reduction, so results are independent of the thread count.
void parallel_for(index_t n, const std::function<void(index_t, index_t)>& body);

}  // namespace sscan
