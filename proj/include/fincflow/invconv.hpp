#pragma once

#include <array>
#include <random>
#include <utility>

#include "fincflow/kernels.hpp"
#include "fincflow/tensor.hpp"

namespace fincflow {

// Kernel tap that multiplies pixel (i, j) itself once the input is padded on
// the orientation's corner: (k-1, k-1) for TL, (k-1, 0) for TR, (0, k-1) for
// BL, (0, 0) for BR.
constexpr std::pair<std::size_t, std::size_t> anchor_tap(Orientation o, std::size_t k) {
  return {pads_top(o) ? k - 1 : 0, pads_left(o) ? k - 1 : 0};
}

// Weights (C, C, k, k) of one padded convolution block. The anchor tap holds
// the C x C identity; the other k*k - 1 taps are free.
template <typename T>
struct MaskedKernel {
  Tensor<T> weights;
  Orientation orientation = Orientation::TL;

  std::size_t channels() const { return weights.n(); }
  std::size_t k() const { return weights.h(); }

  static MaskedKernel identity(std::size_t channels, std::size_t k, Orientation o);

  // Off-anchor taps drawn from U(-0.5, 0.5) / k^2.
  static MaskedKernel random(std::size_t channels, std::size_t k, Orientation o, std::mt19937_64& rng);
};

// A corner-padded input paired with its kernel; the kernel carries the
// orientation, so the pair is one value.
template <typename T>
using PaddedConvBlock = MaskedKernel<T>;

template <typename T>
MaskedKernel<T> apply_anchor_mask(MaskedKernel<T> kernel);

// Zeroes the anchor tap of a (C, C, k, k) weight-shaped tensor in place (used
// on gradients).
template <typename T>
void zero_anchor(Tensor<T>& weights_shaped, Orientation o);

// True iff the anchor tap is exactly the channel identity.
template <typename T>
bool anchor_is_identity(const MaskedKernel<T>& kernel);

// Reorients a block to top-left by flipping its kernel spatially.
template <typename T>
MaskedKernel<T> to_top_left(const MaskedKernel<T>& kernel);

template <typename T>
Tensor<T> pcb_forward(const Tensor<T>& x, const PaddedConvBlock<T>& pcb);

// Returns dL/dx and accumulates dL/dweights into grad_weights (anchor included;
// masking is the caller's step).
template <typename T>
Tensor<T> pcb_backward(const Tensor<T>& x, const Tensor<T>& grad_y, const PaddedConvBlock<T>& pcb,
                       Tensor<T>& grad_weights);

// Single-threaded back-substitution in the orientation's own raster order
// (channels innermost). The correctness reference for the parallel path.
template <typename T>
Tensor<T> pcb_invert_reference(const Tensor<T>& y, const PaddedConvBlock<T>& pcb,
                               InversionStats* stats = nullptr);

// Anti-diagonal wavefront inversion on `workers` threads. Non-TL blocks are
// flipped to TL, solved, and flipped back.
template <typename T>
Tensor<T> pcb_invert_wavefront(const Tensor<T>& y, const PaddedConvBlock<T>& pcb, int workers,
                               InversionStats* stats = nullptr);

// Four blocks on channel quarters, in this orientation order.
inline constexpr std::array<Orientation, 4> kUnitOrientations{Orientation::TL, Orientation::TR,
                                                              Orientation::BR, Orientation::BL};

template <typename T>
struct FincFlowUnit {
  std::array<MaskedKernel<T>, 4> blocks;

  // Channel count of the whole unit (4x the per-block count).
  std::size_t channels() const { return 4 * blocks[0].channels(); }
  std::size_t k() const { return blocks[0].k(); }

  static FincFlowUnit identity(std::size_t channels, std::size_t k);
  static FincFlowUnit random(std::size_t channels, std::size_t k, std::mt19937_64& rng);
};

template <typename T>
struct UnitOutput {
  Tensor<T> y;
  double logdet = 0.0;  // always exactly zero: unit-triangular convolution matrix
};

template <typename T>
UnitOutput<T> unit_forward(const Tensor<T>& x, const FincFlowUnit<T>& unit);

template <typename T>
Tensor<T> unit_backward(const Tensor<T>& x, const Tensor<T>& grad_y, const FincFlowUnit<T>& unit,
                        std::array<Tensor<T>, 4>& grad_weights);

// Split, flip quarters 2-4 and their kernels to TL, solve all four as one
// batched wavefront, unflip, concat.
template <typename T>
Tensor<T> unit_invert(const Tensor<T>& y, const FincFlowUnit<T>& unit, int workers,
                      InversionStats* stats = nullptr);

// Four independent pcb_invert_reference calls.
template <typename T>
Tensor<T> unit_invert_reference(const Tensor<T>& y, const FincFlowUnit<T>& unit,
                                InversionStats* stats = nullptr);

}  // namespace fincflow
