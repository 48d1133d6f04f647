#pragma once

#include <cstddef>
#include <vector>

#include "fincflow/invconv.hpp"

namespace fincflow {

// Largest H*W*C for which the dense matrix is materialized.
inline constexpr std::size_t kDenseCap = 4096;

// Dense H*W*C square operator of one padded convolution block on a single
// image. Rows and columns follow the orientation's canonical raster order:
// rows run away from the padded top/bottom edge, columns away from the padded
// left/right edge, channels innermost. In that order the matrix is lower
// triangular with a unit diagonal.
struct ConvMatrix {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  Orientation orientation = Orientation::TL;
  std::vector<double> entries;  // row-major, dim() x dim()

  std::size_t dim() const { return height * width * channels; }
  double at(std::size_t row, std::size_t col) const { return entries[row * dim() + col]; }
};

// Position of (c, h, w) in the canonical order.
std::size_t canonical_index(Orientation o, std::size_t height, std::size_t width, std::size_t channels,
                            std::size_t c, std::size_t h, std::size_t w);

// Built entry by entry from the kernel definition, independent of pcb_forward.
template <typename T>
ConvMatrix build_conv_matrix(const PaddedConvBlock<T>& pcb, std::size_t height, std::size_t width);

// Sample n of x in canonical order, widened to double.
template <typename T>
std::vector<double> vectorize(const Tensor<T>& x, std::size_t n, Orientation o);

Tensor<double> devectorize(const std::vector<double>& v, std::size_t channels, std::size_t height,
                           std::size_t width, Orientation o);

std::vector<double> matvec(const ConvMatrix& m, const std::vector<double>& v);

// Forward substitution on the full dense lower triangle (divides by the
// diagonal; no structure assumed beyond triangularity).
std::vector<double> solve_lower(const ConvMatrix& m, const std::vector<double>& rhs);

// Exact check: every entry above the diagonal is 0.0 and every diagonal entry is 1.0.
bool is_unit_lower_triangular(const ConvMatrix& m);

// Product of the diagonal; equals det(M) when M is triangular.
double triangular_determinant(const ConvMatrix& m);

std::size_t max_row_nonzeros(const ConvMatrix& m);

}  // namespace fincflow
