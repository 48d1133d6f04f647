#pragma once

#include <cmath>

#include "fincflow/tensor.hpp"

namespace fincflow::nn {

// Cross-correlation with implicit zero padding. Output has the input's spatial
// dims:
//   y[n, co, i, j] = bias[co] + sum_{ci, p, q} w[co, ci, p, q] * x[n, ci, i + p - top, j + q - left]
// with out-of-range x read as zero. `w` is (C_out, C_in, kh, kw); `bias`, when
// given, holds C_out values. Taps accumulate in (ci, p, q) order.
template <typename T>
Tensor<T> correlate(const Tensor<T>& x, const Tensor<T>& w, std::size_t top, std::size_t left,
                    const Tensor<T>* bias = nullptr);

// Gradients of `correlate`. Returns dL/dx; adds dL/dw into *grad_w and dL/dbias
// into *grad_bias when those are non-null.
template <typename T>
Tensor<T> correlate_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_y,
                             std::size_t top, std::size_t left, Tensor<T>* grad_w,
                             Tensor<T>* grad_bias = nullptr);

// "same" padding for an odd kernel.
template <typename T>
Tensor<T> conv_same(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  return correlate(x, w, w.h() / 2, w.w() / 2, &bias);
}

template <typename T>
Tensor<T> conv_same_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_y,
                             Tensor<T>& grad_w, Tensor<T>& grad_bias) {
  return correlate_backward(x, w, grad_y, w.h() / 2, w.w() / 2, &grad_w, &grad_bias);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data()) v = v > T(0) ? v : T(0);
  return y;
}

// grad * 1[pre > 0]
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& pre, const Tensor<T>& grad) {
  Tensor<T> g = grad;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(pre[i] > T(0))) g[i] = T(0);
  return g;
}

template <typename T>
T sigmoid(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

}  // namespace fincflow::nn
