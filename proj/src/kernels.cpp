#include "fincflow/kernels.hpp"

#include <algorithm>
#include <string>

#include <omp.h>

#include "fincflow/error.hpp"

namespace fincflow::kernels {

namespace {

// x[n, c, h, w] -= sum over in-bounds non-anchor taps. Weights are stored in
// cross-correlation layout, so the tap at offset (kh, kw) up-left of the
// pixel reads kernel position (k-1-kh, k-1-kw). Returns the multiply-adds.
template <typename T>
inline std::uint64_t solve_element(T* x, const T* weights, const TlSystem& s, std::size_t n,
                                   std::size_t c, std::size_t h, std::size_t w) {
  const std::size_t cg = s.group_channels;
  const std::size_t g = c / cg;
  const std::size_t co = c % cg;
  const std::size_t k = s.k;
  const std::size_t plane = s.height * s.width;
  const T* in = x + (n * s.channels() + g * cg) * plane;
  const T* kern = weights + (g * cg + co) * cg * k * k;

  T acc = x[(n * s.channels() + c) * plane + h * s.width + w];
  std::uint64_t taps = 0;
  const std::size_t kh_end = std::min(k, h + 1);
  const std::size_t kw_end = std::min(k, w + 1);
  for (std::size_t kh = 0; kh < kh_end; ++kh) {
    for (std::size_t kw = (kh == 0 ? 1 : 0); kw < kw_end; ++kw) {
      const std::size_t pix = (h - kh) * s.width + (w - kw);
      const std::size_t tap = (k - 1 - kh) * k + (k - 1 - kw);
      for (std::size_t kc = 0; kc < cg; ++kc) acc -= in[kc * plane + pix] * kern[kc * k * k + tap];
      ++taps;
    }
  }
  x[(n * s.channels() + c) * plane + h * s.width + w] = acc;
  return taps * cg;
}

}  // namespace

template <typename T>
void tl_solve_wavefront(std::span<T> x, std::span<const T> weights, const TlSystem& sys, int workers,
                        InversionStats* stats) {
  if (workers < 1) throw InvalidConfig("workers must be >= 1, got " + std::to_string(workers));
  if (x.size() != sys.elements()) throw ShapeMismatch("wavefront buffer size does not match system");
  if (weights.size() != sys.weight_count()) throw ShapeMismatch("wavefront kernel size does not match system");

  const auto height = static_cast<std::int64_t>(sys.height);
  const auto width = static_cast<std::int64_t>(sys.width);
  const auto lanes = static_cast<std::int64_t>(sys.batch * sys.channels());
  const std::int64_t diagonals = height + width - 1;
  T* xd = x.data();
  const T* wd = weights.data();

  std::uint64_t phases = 0;
  std::uint64_t madds = 0;
  std::uint64_t worst = 0;

#pragma omp parallel num_threads(workers) reduction(+ : madds) reduction(max : worst)
  {
    for (std::int64_t d = 0; d < diagonals; ++d) {
      const std::int64_t h_lo = std::max<std::int64_t>(0, d - width + 1);
      const std::int64_t h_hi = std::min<std::int64_t>(d, height - 1);
      const std::int64_t len = h_hi - h_lo + 1;
      const std::int64_t total = lanes * len;

#pragma omp for schedule(static)
      for (std::int64_t t = 0; t < total; ++t) {
        const std::int64_t lane = t / len;
        const std::int64_t h = h_lo + t % len;
        const auto n = static_cast<std::size_t>(lane) / sys.channels();
        const auto c = static_cast<std::size_t>(lane) % sys.channels();
        const std::uint64_t m = solve_element(xd, wd, sys, n, c, static_cast<std::size_t>(h),
                                              static_cast<std::size_t>(d - h));
        madds += m;
        worst = std::max(worst, m);
      }
      // implicit barrier: diagonal d is final before anyone reads it for d+1

#pragma omp master
      ++phases;
    }
  }

  if (stats) {
    stats->phases += phases;
    stats->madds += madds;
    stats->max_element_madds = std::max(stats->max_element_madds, worst);
  }
}

template void tl_solve_wavefront(std::span<float>, std::span<const float>, const TlSystem&, int,
                                 InversionStats*);
template void tl_solve_wavefront(std::span<double>, std::span<const double>, const TlSystem&, int,
                                 InversionStats*);

}  // namespace fincflow::kernels
