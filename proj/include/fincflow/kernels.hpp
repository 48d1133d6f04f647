#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace fincflow {

// Instrumentation filled in by the inversion routines.
struct InversionStats {
  std::uint64_t phases = 0;             // sequential, barrier-separated steps
  std::uint64_t madds = 0;              // multiply-adds over the whole call
  std::uint64_t max_element_madds = 0;  // worst single output element
};

namespace kernels {

// A stack of independent top-left anchored convolution systems. Channels are
// partitioned into `groups` blocks of `group_channels`; each block has its own
// (group_channels x group_channels x k x k) kernel and never reads another
// block. The batch is folded into the parallel index set.
struct TlSystem {
  std::size_t batch = 1;
  std::size_t groups = 1;
  std::size_t group_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t k = 1;

  std::size_t channels() const { return groups * group_channels; }
  std::size_t elements() const { return batch * channels() * height * width; }
  std::size_t weight_count() const { return groups * group_channels * group_channels * k * k; }
};

// Solves in place: x holds the convolution output on entry and its preimage on
// exit. Anti-diagonals h+w = d are processed in order; all (n, c, h, w) on one
// diagonal are split across `workers` threads and a barrier closes each
// diagonal. The anchor tap (identity channel block) is skipped. Every element
// uses the same tap order (row offset, column offset, input channel), so the
// result does not depend on the worker count.
template <typename T>
void tl_solve_wavefront(std::span<T> x, std::span<const T> weights, const TlSystem& sys, int workers,
                        InversionStats* stats = nullptr);

}  // namespace kernels
}  // namespace fincflow
