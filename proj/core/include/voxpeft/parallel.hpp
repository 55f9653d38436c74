#pragma once

#include <cstddef>
#include <functional>

namespace voxpeft {

// Worker count used by the heavier kernels. Each output element is produced by
// exactly one worker with a fixed accumulation order, so results do not depend
// on this value.
void set_num_threads(std::size_t n);
std::size_t num_threads();

// Runs body(i) for i in [0, n). Falls back to a plain loop when `work` (a rough
// flop estimate) is too small to amortize thread start-up.
void parallel_for(std::size_t n, std::size_t work, const std::function<void(std::size_t)>& body);

} // namespace voxpeft
