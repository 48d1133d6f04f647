#include "fincflow/dense_oracle.hpp"

namespace fincflow {

std::size_t canonical_index(Orientation o, std::size_t height, std::size_t width, std::size_t channels,
                            std::size_t c, std::size_t h, std::size_t w) {
  const std::size_t r = pads_top(o) ? h : height - 1 - h;
  const std::size_t col = pads_left(o) ? w : width - 1 - w;
  return (r * width + col) * channels + c;
}

template <typename T>
ConvMatrix build_conv_matrix(const PaddedConvBlock<T>& pcb, std::size_t height, std::size_t width) {
  const std::size_t C = pcb.channels();
  const std::size_t k = pcb.k();
  if (height * width * C > kDenseCap)
    throw TooLargeForDense(std::to_string(height * width * C) + " > " + std::to_string(kDenseCap));

  ConvMatrix m{height, width, C, pcb.orientation, {}};
  m.entries.assign(m.dim() * m.dim(), 0.0);
  // Padded image index (a, b) holds x[a - top, b - left]; output (i, j) reads
  // padded (i + p, j + q).
  const std::ptrdiff_t top = pads_top(pcb.orientation) ? static_cast<std::ptrdiff_t>(k) - 1 : 0;
  const std::ptrdiff_t left = pads_left(pcb.orientation) ? static_cast<std::ptrdiff_t>(k) - 1 : 0;
  for (std::size_t co = 0; co < C; ++co)
    for (std::size_t i = 0; i < height; ++i)
      for (std::size_t j = 0; j < width; ++j) {
        const std::size_t row = canonical_index(pcb.orientation, height, width, C, co, i, j);
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t q = 0; q < k; ++q) {
            const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + p) - top;
            const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + q) - left;
            if (si < 0 || sj < 0 || si >= static_cast<std::ptrdiff_t>(height) ||
                sj >= static_cast<std::ptrdiff_t>(width))
              continue;
            for (std::size_t ci = 0; ci < C; ++ci) {
              const std::size_t col = canonical_index(pcb.orientation, height, width, C, ci,
                                                      static_cast<std::size_t>(si), static_cast<std::size_t>(sj));
              m.entries[row * m.dim() + col] += static_cast<double>(pcb.weights(co, ci, p, q));
            }
          }
      }
  return m;
}

template <typename T>
std::vector<double> vectorize(const Tensor<T>& x, std::size_t n, Orientation o) {
  const Shape s = x.shape();
  std::vector<double> v(s.c * s.h * s.w);
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t h = 0; h < s.h; ++h)
      for (std::size_t w = 0; w < s.w; ++w)
        v[canonical_index(o, s.h, s.w, s.c, c, h, w)] = static_cast<double>(x(n, c, h, w));
  return v;
}

Tensor<double> devectorize(const std::vector<double>& v, std::size_t channels, std::size_t height,
                           std::size_t width, Orientation o) {
  if (v.size() != channels * height * width) throw ShapeMismatch("devectorize length");
  Tensor<double> x({1, channels, height, width});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t h = 0; h < height; ++h)
      for (std::size_t w = 0; w < width; ++w)
        x(0, c, h, w) = v[canonical_index(o, height, width, channels, c, h, w)];
  return x;
}

std::vector<double> matvec(const ConvMatrix& m, const std::vector<double>& v) {
  const std::size_t d = m.dim();
  if (v.size() != d) throw ShapeMismatch("matvec length");
  std::vector<double> out(d, 0.0);
  for (std::size_t r = 0; r < d; ++r) {
    double s = 0.0;
    const double* row = &m.entries[r * d];
    for (std::size_t c = 0; c < d; ++c) s += row[c] * v[c];
    out[r] = s;
  }
  return out;
}

std::vector<double> solve_lower(const ConvMatrix& m, const std::vector<double>& rhs) {
  const std::size_t d = m.dim();
  if (rhs.size() != d) throw ShapeMismatch("solve length");
  std::vector<double> x(d, 0.0);
  for (std::size_t r = 0; r < d; ++r) {
    const double* row = &m.entries[r * d];
    double s = rhs[r];
    for (std::size_t c = 0; c < r; ++c) s -= row[c] * x[c];
    x[r] = s / row[r];
  }
  return x;
}

bool is_unit_lower_triangular(const ConvMatrix& m) {
  const std::size_t d = m.dim();
  for (std::size_t r = 0; r < d; ++r) {
    if (m.at(r, r) != 1.0) return false;
    for (std::size_t c = r + 1; c < d; ++c)
      if (m.at(r, c) != 0.0) return false;
  }
  return true;
}

double triangular_determinant(const ConvMatrix& m) {
  double det = 1.0;
  for (std::size_t r = 0; r < m.dim(); ++r) det *= m.at(r, r);
  return det;
}

std::size_t max_row_nonzeros(const ConvMatrix& m) {
  std::size_t worst = 0;
  for (std::size_t r = 0; r < m.dim(); ++r) {
    std::size_t nz = 0;
    for (std::size_t c = 0; c < m.dim(); ++c) nz += m.at(r, c) != 0.0;
    worst = std::max(worst, nz);
  }
  return worst;
}

template ConvMatrix build_conv_matrix(const PaddedConvBlock<float>&, std::size_t, std::size_t);
template ConvMatrix build_conv_matrix(const PaddedConvBlock<double>&, std::size_t, std::size_t);
template std::vector<double> vectorize(const Tensor<float>&, std::size_t, Orientation);
template std::vector<double> vectorize(const Tensor<double>&, std::size_t, Orientation);

}  // namespace fincflow
