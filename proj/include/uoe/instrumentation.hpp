#pragma once

#include <cstdint>

namespace uoe {

// Declared FLOP conventions, shared by the runtime counter (bumped inside
// the kernels) and the analytic model in flops.hpp. A multiply-add pair
// counts as 2; transcendental-heavy per-element ops use flat rates.
inline constexpr std::uint64_t kFlopsPerSoftmaxElem = 5;
inline constexpr std::uint64_t kFlopsPerNormElem = 5;     // layer norm
inline constexpr std::uint64_t kFlopsPerActElem = 5;      // silu
inline constexpr std::uint64_t kFlopsPerCrossEntropyElem = 5;
inline constexpr std::uint64_t kFlopsPerRopeElem = 8;     // rotated span only
inline constexpr std::uint64_t kFlopsPerIndexElem = 1;    // gather/scatter move

// Per-thread counters for forward-pass accounting. Gather/scatter pass
// counts back the single-pass routing claim; the guard counter records
// fully-masked softmax rows that were forced to zero.
struct OpCounters {
  std::uint64_t flops = 0;
  std::uint64_t gather_passes = 0;
  std::uint64_t scatter_passes = 0;
  std::uint64_t masked_rows_zeroed = 0;

  void reset() { *this = OpCounters{}; }
};

inline OpCounters& op_counters() {
  thread_local OpCounters counters;
  return counters;
}

}  // namespace uoe
