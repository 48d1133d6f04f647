#pragma once

#include <filesystem>
#include <iosfwd>
#include <variant>

#include "fincflow/tensor.hpp"

namespace fincflow {

// .ften layout, all little-endian:
//   [0,8)   magic "FINCTEN\0"
//   [8]     dtype code, 1 = f32, 2 = f64
//   [9,13)  reserved, zero
//   [13,29) u32 dims N, C, H, W
//   [29,..) N*C*H*W elements in (N,C,H,W) row-major order
// The "body" is everything after the magic; checkpoints embed bodies.

enum class Dtype : std::uint8_t { F32 = 1, F64 = 2 };

template <typename T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() { return Dtype::F32; }
template <>
constexpr Dtype dtype_of<double>() { return Dtype::F64; }

inline const char* to_string(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

template <typename T>
void write_tensor_body(std::ostream& out, const Tensor<T>& x);
AnyTensor read_tensor_body(std::istream& in);

template <typename T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& x);
AnyTensor read_tensor(const std::filesystem::path& path);

// Reads either dtype and converts to T.
template <typename T>
Tensor<T> read_tensor_as(const std::filesystem::path& path) {
  return std::visit([](const auto& t) { return t.template cast<T>(); }, read_tensor(path));
}

}  // namespace fincflow
