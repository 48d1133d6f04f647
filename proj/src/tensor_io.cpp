#include "fincflow/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "io_util.hpp"

namespace fincflow {

namespace {

constexpr char kMagic[8] = {'F', 'I', 'N', 'C', 'T', 'E', 'N', '\0'};

template <typename T>
Tensor<T> read_elements(std::istream& in, Shape shape) {
  std::vector<T> data(shape.size());
  if constexpr (std::endian::native == std::endian::little) {
    const auto bytes = static_cast<std::streamsize>(data.size() * sizeof(T));
    if (!in.read(reinterpret_cast<char*>(data.data()), bytes))
      throw TruncatedFile("expected " + std::to_string(data.size()) + " elements, got " +
                          std::to_string(in.gcount() / static_cast<std::streamsize>(sizeof(T))));
  } else {
    for (auto& v : data) v = io::read_le<T>(in, "tensor elements");
  }
  return Tensor<T>(shape, std::move(data));
}

}  // namespace

template <typename T>
void write_tensor_body(std::ostream& out, const Tensor<T>& x) {
  io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of<T>()));
  for (int i = 0; i < 4; ++i) io::write_le<std::uint8_t>(out, 0);
  const Shape s = x.shape();
  for (std::size_t d : {s.n, s.c, s.h, s.w}) io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(x.raw()), static_cast<std::streamsize>(x.size() * sizeof(T)));
  } else {
    for (T v : x.data()) io::write_le<T>(out, v);
  }
}

AnyTensor read_tensor_body(std::istream& in) {
  const auto code = io::read_le<std::uint8_t>(in, "dtype");
  std::uint8_t reserved[4];
  for (auto& r : reserved) r = io::read_le<std::uint8_t>(in, "reserved header");
  Shape s;
  s.n = io::read_le<std::uint32_t>(in, "dims");
  s.c = io::read_le<std::uint32_t>(in, "dims");
  s.h = io::read_le<std::uint32_t>(in, "dims");
  s.w = io::read_le<std::uint32_t>(in, "dims");
  if (code != 1 && code != 2) throw UnsupportedDtype("dtype code " + std::to_string(code));
  for (auto r : reserved)
    if (r != 0) throw BadFormat("reserved header bytes must be zero");
  if (!s.valid()) throw BadFormat("zero dimension in " + s.str());
  if (code == static_cast<std::uint8_t>(Dtype::F32)) return read_elements<float>(in, s);
  return read_elements<double>(in, s);
}

template <typename T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& x) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  write_tensor_body(out, x);
  if (!out) throw Error("write failed: " + path.string());
}

AnyTensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic))) throw TruncatedFile(path.string() + ": missing magic");
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw BadMagic(path.string());
  return read_tensor_body(in);
}

template void write_tensor_body(std::ostream&, const Tensor<float>&);
template void write_tensor_body(std::ostream&, const Tensor<double>&);
template void write_tensor(const std::filesystem::path&, const Tensor<float>&);
template void write_tensor(const std::filesystem::path&, const Tensor<double>&);

}  // namespace fincflow
