#pragma once

#include <cstdint>
#include <functional>

namespace facetrack {

/// Worker count used by parallel_for. 0 selects the hardware concurrency.
void set_thread_count(int threads);
int thread_count();

/// Runs body(i) for i in [0, n). Each index must write only its own outputs;
/// results are then independent of scheduling.
void parallel_for(int n, const std::function<void(int)>& body);

/// SplitMix64 step, used to derive independent seeds from a master seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace facetrack
