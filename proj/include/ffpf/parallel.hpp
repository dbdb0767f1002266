#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>

namespace ffpf {

/// Worker cap from FFPF_THREADS (default 1).
int thread_limit();

/// Calls fn(i) for i in [0, count). Every index must write disjoint outputs; the result is
/// then independent of how indices are scheduled across threads.
void parallel_for(std::int64_t count, const std::function<void(std::int64_t)>& fn);

}  // namespace ffpf
