#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fincflow/error.hpp"

namespace fincflow {

struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t size() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  constexpr bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

// Corner at which a padded convolution block places its zero padding.
enum class Orientation : std::uint8_t { TL, TR, BL, BR };

inline constexpr std::array<Orientation, 4> kAllOrientations{Orientation::TL, Orientation::TR,
                                                             Orientation::BL, Orientation::BR};

constexpr bool pads_top(Orientation o) { return o == Orientation::TL || o == Orientation::TR; }
constexpr bool pads_left(Orientation o) { return o == Orientation::TL || o == Orientation::BL; }

inline const char* to_string(Orientation o) {
  switch (o) {
    case Orientation::TL: return "TL";
    case Orientation::TR: return "TR";
    case Orientation::BL: return "BL";
    case Orientation::BR: return "BR";
  }
  return "?";
}

struct FlipAxes {
  bool height = false;
  bool width = false;
};

// Flips that carry an orientation's padding corner to the top-left.
constexpr FlipAxes flips_to_tl(Orientation o) { return {!pads_top(o), !pads_left(o)}; }

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.size(), fill) {
    if (!shape.valid()) throw ShapeMismatch("all dims must be >= 1, got " + shape.str());
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (!shape.valid()) throw ShapeMismatch("all dims must be >= 1, got " + shape.str());
    if (data_.size() != shape.size())
      throw ShapeMismatch("element count " + std::to_string(data_.size()) + " != " + shape.str());
  }

  const Shape& shape() const { return shape_; }
  std::size_t n() const { return shape_.n; }
  std::size_t c() const { return shape_.c; }
  std::size_t h() const { return shape_.h; }
  std::size_t w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[offset(n, c, h, w)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[offset(n, c, h, w)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Same element order, new dims with equal volume.
  Tensor reshaped(Shape s) const {
    if (s.size() != shape_.size()) throw ShapeMismatch("reshape " + shape_.str() + " -> " + s.str());
    return Tensor(s, data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
};

// Zero-pads k-1 rows/cols on the two sides named by the orientation.
template <typename T>
Tensor<T> pad_oriented(const Tensor<T>& x, Orientation o, std::size_t k) {
  if (k == 0) throw ShapeMismatch("kernel size must be >= 1");
  const std::size_t p = k - 1;
  const Shape s = x.shape();
  Tensor<T> out({s.n, s.c, s.h + p, s.w + p});
  const std::size_t top = pads_top(o) ? p : 0;
  const std::size_t left = pads_left(o) ? p : 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t h = 0; h < s.h; ++h)
        std::copy_n(&x(n, c, h, 0), s.w, &out(n, c, h + top, left));
  return out;
}

template <typename T>
Tensor<T> flip(const Tensor<T>& x, FlipAxes axes) {
  if (!axes.height && !axes.width) return x;
  const Shape s = x.shape();
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t h = 0; h < s.h; ++h) {
        const std::size_t sh = axes.height ? s.h - 1 - h : h;
        const T* src = &x(n, c, sh, 0);
        T* dst = &out(n, c, h, 0);
        if (axes.width)
          std::reverse_copy(src, src + s.w, dst);
        else
          std::copy_n(src, s.w, dst);
      }
  return out;
}

// Copies channels [begin, begin+count) of every sample.
template <typename T>
Tensor<T> channel_slice(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  const Shape s = x.shape();
  if (count == 0 || begin + count > s.c)
    throw ShapeMismatch("channel slice [" + std::to_string(begin) + "," +
                        std::to_string(begin + count) + ") of " + s.str());
  Tensor<T> out({s.n, count, s.h, s.w});
  const std::size_t block = count * s.plane();
  for (std::size_t n = 0; n < s.n; ++n)
    std::copy_n(&x(n, begin, 0, 0), block, &out(n, 0, 0, 0));
  return out;
}

template <typename T>
std::vector<Tensor<T>> channel_split(const Tensor<T>& x, std::size_t parts) {
  if (parts == 0 || x.c() % parts != 0)
    throw IndivisibleChannels(std::to_string(x.c()) + " channels into " + std::to_string(parts) +
                              " parts");
  if (parts == 1) return {x};
  const std::size_t each = x.c() / parts;
  std::vector<Tensor<T>> out;
  out.reserve(parts);
  for (std::size_t i = 0; i < parts; ++i) out.push_back(channel_slice(x, i * each, each));
  return out;
}

template <typename T>
Tensor<T> channel_concat(std::span<const Tensor<T>> xs) {
  if (xs.empty()) throw ShapeMismatch("concat of zero tensors");
  const Shape first = xs.front().shape();
  std::size_t channels = 0;
  for (const auto& x : xs) {
    const Shape s = x.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w)
      throw ShapeMismatch("concat " + first.str() + " with " + s.str());
    channels += s.c;
  }
  Tensor<T> out({first.n, channels, first.h, first.w});
  for (std::size_t n = 0; n < first.n; ++n) {
    std::size_t c0 = 0;
    for (const auto& x : xs) {
      std::copy_n(&x(n, 0, 0, 0), x.c() * first.plane(), &out(n, c0, 0, 0));
      c0 += x.c();
    }
  }
  return out;
}

template <typename T>
Tensor<T> channel_concat(std::initializer_list<Tensor<T>> xs) {
  return channel_concat(std::span<const Tensor<T>>(xs.begin(), xs.size()));
}

template <typename T>
Tensor<T> channel_concat(const std::vector<Tensor<T>>& xs) {
  return channel_concat(std::span<const Tensor<T>>(xs));
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeMismatch(a.shape().str() + " vs " + b.shape().str());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace fincflow
