#include "fincflow/nn.hpp"

#include <algorithm>

namespace fincflow::nn {

namespace {

struct Range {
  std::size_t lo;
  std::size_t hi;
};

// Output indices i with 0 <= i + tap - pad < extent.
inline Range valid_range(std::size_t extent, std::size_t tap, std::size_t pad) {
  const std::size_t lo = pad > tap ? pad - tap : 0;
  const std::size_t hi = std::min(extent, extent + pad >= tap ? extent + pad - tap : 0);
  return {lo, std::max(lo, hi)};
}

void check_geometry(const Shape& x, const Shape& w, std::size_t top, std::size_t left) {
  if (w.c != x.c)
    throw ShapeMismatch("kernel expects " + std::to_string(w.c) + " input channels, got " +
                        std::to_string(x.c));
  if (top >= w.h || left >= w.w) throw ShapeMismatch("padding must be smaller than the kernel");
}

}  // namespace

template <typename T>
Tensor<T> correlate(const Tensor<T>& x, const Tensor<T>& w, std::size_t top, std::size_t left,
                    const Tensor<T>* bias) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  check_geometry(xs, ws, top, left);
  if (bias && bias->size() != ws.n) throw ShapeMismatch("bias length != output channels");

  Tensor<T> y({xs.n, ws.n, xs.h, xs.w});
  const std::size_t H = xs.h, W = xs.w;
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t co = 0; co < ws.n; ++co) {
      T* yp = &y(n, co, 0, 0);
      if (bias) std::fill_n(yp, H * W, (*bias)[co]);
      for (std::size_t ci = 0; ci < ws.c; ++ci) {
        const T* xp = &x(n, ci, 0, 0);
        for (std::size_t p = 0; p < ws.h; ++p) {
          const Range ri = valid_range(H, p, top);
          for (std::size_t q = 0; q < ws.w; ++q) {
            const T wv = w(co, ci, p, q);
            const Range rj = valid_range(W, q, left);
            for (std::size_t i = ri.lo; i < ri.hi; ++i) {
              T* yrow = yp + i * W;
              const T* xrow = xp + (i + p - top) * W;
              for (std::size_t j = rj.lo; j < rj.hi; ++j) yrow[j] += wv * xrow[j + q - left];
            }
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> correlate_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_y,
                             std::size_t top, std::size_t left, Tensor<T>* grad_w, Tensor<T>* grad_bias) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  check_geometry(xs, ws, top, left);
  if (grad_y.shape() != Shape{xs.n, ws.n, xs.h, xs.w}) throw ShapeMismatch("correlate gradient shape");
  if (grad_w && grad_w->shape() != ws) throw ShapeMismatch("weight gradient shape");

  Tensor<T> gx(xs);
  const std::size_t H = xs.h, W = xs.w;
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t co = 0; co < ws.n; ++co) {
      const T* gp = &grad_y(n, co, 0, 0);
      if (grad_bias) {
        T s = 0;
        for (std::size_t i = 0; i < H * W; ++i) s += gp[i];
        (*grad_bias)[co] += s;
      }
      for (std::size_t ci = 0; ci < ws.c; ++ci) {
        const T* xp = &x(n, ci, 0, 0);
        T* gxp = &gx(n, ci, 0, 0);
        for (std::size_t p = 0; p < ws.h; ++p) {
          const Range ri = valid_range(H, p, top);
          for (std::size_t q = 0; q < ws.w; ++q) {
            const T wv = w(co, ci, p, q);
            const Range rj = valid_range(W, q, left);
            T gw = 0;
            for (std::size_t i = ri.lo; i < ri.hi; ++i) {
              const T* grow = gp + i * W;
              const std::size_t row = (i + p - top) * W;
              for (std::size_t j = rj.lo; j < rj.hi; ++j) {
                gxp[row + j + q - left] += wv * grow[j];
                gw += grow[j] * xp[row + j + q - left];
              }
            }
            if (grad_w) (*grad_w)(co, ci, p, q) += gw;
          }
        }
      }
    }
  }
  return gx;
}

template Tensor<float> correlate(const Tensor<float>&, const Tensor<float>&, std::size_t, std::size_t,
                                 const Tensor<float>*);
template Tensor<double> correlate(const Tensor<double>&, const Tensor<double>&, std::size_t, std::size_t,
                                  const Tensor<double>*);
template Tensor<float> correlate_backward(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                          std::size_t, std::size_t, Tensor<float>*, Tensor<float>*);
template Tensor<double> correlate_backward(const Tensor<double>&, const Tensor<double>&,
                                           const Tensor<double>&, std::size_t, std::size_t,
                                           Tensor<double>*, Tensor<double>*);

}  // namespace fincflow::nn
