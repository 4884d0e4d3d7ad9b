#pragma once

#include <cstdint>
#include <functional>

namespace sca {

// Worker cap: SCA_THREADS environment variable, else hardware concurrency.
int max_threads();
void set_max_threads(int n);

// Statically partitions [begin, end) into at most max_threads() chunks and
// runs fn(chunk_begin, chunk_end) on each. Partitioning is over independent
// indices only, so results do not depend on the thread count. Small ranges
// run inline.
void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace sca
