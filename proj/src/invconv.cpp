#include "fincflow/invconv.hpp"

#include "fincflow/nn.hpp"

namespace fincflow {

namespace {

template <typename T>
void check_block_input(const Tensor<T>& x, const MaskedKernel<T>& pcb) {
  const Shape ws = pcb.weights.shape();
  if (ws.n != ws.c || ws.h != ws.w) throw ShapeMismatch("masked kernel must be (C, C, k, k), got " + ws.str());
  if (x.c() != ws.c)
    throw ShapeMismatch("block has " + std::to_string(ws.c) + " channels, input has " + std::to_string(x.c()));
}

std::size_t top_pad(Orientation o, std::size_t k) { return pads_top(o) ? k - 1 : 0; }
std::size_t left_pad(Orientation o, std::size_t k) { return pads_left(o) ? k - 1 : 0; }

}  // namespace

template <typename T>
MaskedKernel<T> MaskedKernel<T>::identity(std::size_t channels, std::size_t k, Orientation o) {
  return apply_anchor_mask(MaskedKernel{Tensor<T>({channels, channels, k, k}), o});
}

template <typename T>
MaskedKernel<T> MaskedKernel<T>::random(std::size_t channels, std::size_t k, Orientation o,
                                        std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  const double scale = 1.0 / static_cast<double>(k * k);
  Tensor<T> w({channels, channels, k, k});
  for (auto& v : w.data()) v = static_cast<T>(u(rng) * scale);
  return apply_anchor_mask(MaskedKernel{std::move(w), o});
}

template <typename T>
MaskedKernel<T> apply_anchor_mask(MaskedKernel<T> kernel) {
  const auto [p, q] = anchor_tap(kernel.orientation, kernel.k());
  const std::size_t C = kernel.channels();
  for (std::size_t co = 0; co < C; ++co)
    for (std::size_t ci = 0; ci < C; ++ci) kernel.weights(co, ci, p, q) = co == ci ? T(1) : T(0);
  return kernel;
}

template <typename T>
void zero_anchor(Tensor<T>& weights_shaped, Orientation o) {
  const auto [p, q] = anchor_tap(o, weights_shaped.h());
  for (std::size_t co = 0; co < weights_shaped.n(); ++co)
    for (std::size_t ci = 0; ci < weights_shaped.c(); ++ci) weights_shaped(co, ci, p, q) = T(0);
}

template <typename T>
bool anchor_is_identity(const MaskedKernel<T>& kernel) {
  const auto [p, q] = anchor_tap(kernel.orientation, kernel.k());
  for (std::size_t co = 0; co < kernel.channels(); ++co)
    for (std::size_t ci = 0; ci < kernel.channels(); ++ci)
      if (kernel.weights(co, ci, p, q) != (co == ci ? T(1) : T(0))) return false;
  return true;
}

template <typename T>
MaskedKernel<T> to_top_left(const MaskedKernel<T>& kernel) {
  return {flip(kernel.weights, flips_to_tl(kernel.orientation)), Orientation::TL};
}

template <typename T>
Tensor<T> pcb_forward(const Tensor<T>& x, const PaddedConvBlock<T>& pcb) {
  check_block_input(x, pcb);
  const std::size_t k = pcb.k();
  return nn::correlate(x, pcb.weights, top_pad(pcb.orientation, k), left_pad(pcb.orientation, k));
}

template <typename T>
Tensor<T> pcb_backward(const Tensor<T>& x, const Tensor<T>& grad_y, const PaddedConvBlock<T>& pcb,
                       Tensor<T>& grad_weights) {
  check_block_input(x, pcb);
  if (grad_y.shape() != x.shape()) throw ShapeMismatch("block gradient must match input shape");
  const std::size_t k = pcb.k();
  return nn::correlate_backward(x, pcb.weights, grad_y, top_pad(pcb.orientation, k),
                                left_pad(pcb.orientation, k), &grad_weights);
}

template <typename T>
Tensor<T> pcb_invert_reference(const Tensor<T>& y, const PaddedConvBlock<T>& pcb, InversionStats* stats) {
  check_block_input(y, pcb);
  const Shape s = y.shape();
  const std::size_t k = pcb.k();
  const std::size_t top = top_pad(pcb.orientation, k);
  const std::size_t left = left_pad(pcb.orientation, k);
  const auto [ap, aq] = anchor_tap(pcb.orientation, k);
  const bool rows_down = pads_top(pcb.orientation);
  const bool cols_right = pads_left(pcb.orientation);
  const auto H = static_cast<std::ptrdiff_t>(s.h);
  const auto W = static_cast<std::ptrdiff_t>(s.w);

  Tensor<T> x = y;
  std::uint64_t madds = 0;
  std::uint64_t worst = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t r = 0; r < s.h; ++r) {
      const std::size_t h = rows_down ? r : s.h - 1 - r;
      for (std::size_t col = 0; col < s.w; ++col) {
        const std::size_t w = cols_right ? col : s.w - 1 - col;
        for (std::size_t c = 0; c < s.c; ++c) {
          T acc = y(n, c, h, w);
          std::uint64_t m = 0;
          for (std::size_t p = 0; p < k; ++p) {
            const auto hh = static_cast<std::ptrdiff_t>(h + p) - static_cast<std::ptrdiff_t>(top);
            if (hh < 0 || hh >= H) continue;
            for (std::size_t q = 0; q < k; ++q) {
              if (p == ap && q == aq) continue;
              const auto ww = static_cast<std::ptrdiff_t>(w + q) - static_cast<std::ptrdiff_t>(left);
              if (ww < 0 || ww >= W) continue;
              for (std::size_t ci = 0; ci < s.c; ++ci)
                acc -= pcb.weights(c, ci, p, q) * x(n, ci, static_cast<std::size_t>(hh), static_cast<std::size_t>(ww));
              m += s.c;
            }
          }
          x(n, c, h, w) = acc;
          madds += m;
          worst = std::max(worst, m);
        }
      }
    }
  }
  if (stats) {
    stats->phases += s.size();  // one sequential step per solved element
    stats->madds += madds;
    stats->max_element_madds = std::max(stats->max_element_madds, worst);
  }
  return x;
}

template <typename T>
Tensor<T> pcb_invert_wavefront(const Tensor<T>& y, const PaddedConvBlock<T>& pcb, int workers,
                               InversionStats* stats) {
  check_block_input(y, pcb);
  const FlipAxes axes = flips_to_tl(pcb.orientation);
  Tensor<T> x = flip(y, axes);
  const MaskedKernel<T> tl = to_top_left(pcb);
  const Shape s = y.shape();
  const kernels::TlSystem sys{s.n, 1, s.c, s.h, s.w, pcb.k()};
  kernels::tl_solve_wavefront<T>(x.data(), tl.weights.data(), sys, workers, stats);
  return flip(x, axes);
}

template <typename T>
FincFlowUnit<T> FincFlowUnit<T>::identity(std::size_t channels, std::size_t k) {
  if (channels % 4 != 0) throw IndivisibleChannels(std::to_string(channels) + " channels into 4 blocks");
  FincFlowUnit u;
  for (std::size_t i = 0; i < 4; ++i) u.blocks[i] = MaskedKernel<T>::identity(channels / 4, k, kUnitOrientations[i]);
  return u;
}

template <typename T>
FincFlowUnit<T> FincFlowUnit<T>::random(std::size_t channels, std::size_t k, std::mt19937_64& rng) {
  if (channels % 4 != 0) throw IndivisibleChannels(std::to_string(channels) + " channels into 4 blocks");
  FincFlowUnit u;
  for (std::size_t i = 0; i < 4; ++i)
    u.blocks[i] = MaskedKernel<T>::random(channels / 4, k, kUnitOrientations[i], rng);
  return u;
}

template <typename T>
UnitOutput<T> unit_forward(const Tensor<T>& x, const FincFlowUnit<T>& unit) {
  auto parts = channel_split(x, 4);
  for (std::size_t i = 0; i < 4; ++i) parts[i] = pcb_forward(parts[i], unit.blocks[i]);
  return {channel_concat(parts), 0.0};
}

template <typename T>
Tensor<T> unit_backward(const Tensor<T>& x, const Tensor<T>& grad_y, const FincFlowUnit<T>& unit,
                        std::array<Tensor<T>, 4>& grad_weights) {
  auto xs = channel_split(x, 4);
  auto gs = channel_split(grad_y, 4);
  for (std::size_t i = 0; i < 4; ++i) gs[i] = pcb_backward(xs[i], gs[i], unit.blocks[i], grad_weights[i]);
  return channel_concat(gs);
}

template <typename T>
Tensor<T> unit_invert(const Tensor<T>& y, const FincFlowUnit<T>& unit, int workers, InversionStats* stats) {
  auto parts = channel_split(y, 4);
  const std::size_t cg = y.c() / 4;
  const std::size_t k = unit.k();
  std::vector<T> weights;
  weights.reserve(4 * cg * cg * k * k);
  for (std::size_t i = 0; i < 4; ++i) {
    if (unit.blocks[i].channels() != cg || unit.blocks[i].k() != k)
      throw ShapeMismatch("unit block " + std::to_string(i) + " does not fit a " + std::to_string(y.c()) +
                          "-channel input");
    parts[i] = flip(parts[i], flips_to_tl(unit.blocks[i].orientation));
    const auto tl = to_top_left(unit.blocks[i]);
    weights.insert(weights.end(), tl.weights.data().begin(), tl.weights.data().end());
  }
  Tensor<T> x = channel_concat(parts);
  const Shape s = y.shape();
  const kernels::TlSystem sys{s.n, 4, cg, s.h, s.w, k};
  kernels::tl_solve_wavefront<T>(x.data(), weights, sys, workers, stats);

  parts = channel_split(x, 4);
  for (std::size_t i = 0; i < 4; ++i) parts[i] = flip(parts[i], flips_to_tl(unit.blocks[i].orientation));
  return channel_concat(parts);
}

template <typename T>
Tensor<T> unit_invert_reference(const Tensor<T>& y, const FincFlowUnit<T>& unit, InversionStats* stats) {
  auto parts = channel_split(y, 4);
  for (std::size_t i = 0; i < 4; ++i) parts[i] = pcb_invert_reference(parts[i], unit.blocks[i], stats);
  return channel_concat(parts);
}

#define FINCFLOW_INSTANTIATE(T)                                                                          \
  template struct MaskedKernel<T>;                                                                       \
  template struct FincFlowUnit<T>;                                                                       \
  template MaskedKernel<T> apply_anchor_mask(MaskedKernel<T>);                                           \
  template void zero_anchor(Tensor<T>&, Orientation);                                                    \
  template bool anchor_is_identity(const MaskedKernel<T>&);                                              \
  template MaskedKernel<T> to_top_left(const MaskedKernel<T>&);                                          \
  template Tensor<T> pcb_forward(const Tensor<T>&, const PaddedConvBlock<T>&);                           \
  template Tensor<T> pcb_backward(const Tensor<T>&, const Tensor<T>&, const PaddedConvBlock<T>&,          \
                                  Tensor<T>&);                                                           \
  template Tensor<T> pcb_invert_reference(const Tensor<T>&, const PaddedConvBlock<T>&, InversionStats*); \
  template Tensor<T> pcb_invert_wavefront(const Tensor<T>&, const PaddedConvBlock<T>&, int,              \
                                          InversionStats*);                                              \
  template UnitOutput<T> unit_forward(const Tensor<T>&, const FincFlowUnit<T>&);                         \
  template Tensor<T> unit_backward(const Tensor<T>&, const Tensor<T>&, const FincFlowUnit<T>&,            \
                                   std::array<Tensor<T>, 4>&);                                           \
  template Tensor<T> unit_invert(const Tensor<T>&, const FincFlowUnit<T>&, int, InversionStats*);        \
  template Tensor<T> unit_invert_reference(const Tensor<T>&, const FincFlowUnit<T>&, InversionStats*);

FINCFLOW_INSTANTIATE(float)
FINCFLOW_INSTANTIATE(double)

#undef FINCFLOW_INSTANTIATE

}  // namespace fincflow
