#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "fincflow/tensor.hpp"
#include "fincflow/tensor_io.hpp"
#include "helpers.hpp"

using namespace fincflow;
using testutil::random_tensor;

namespace {

Tensor<double> from_rows(std::size_t h, std::size_t w, std::vector<double> v) {
  return Tensor<double>({1, 1, h, w}, std::move(v));
}

}  // namespace

TEST_SUITE("tensor-core") {
  TEST_CASE("offset follows (n, c, h, w) row-major order") {
    Tensor<float> t({2, 3, 4, 5});
    CHECK(t.size() == 120);
    CHECK(t.offset(1, 2, 3, 4) == ((1 * 3 + 2) * 4 + 3) * 5 + 4);
    t(1, 2, 3, 4) = 7.0f;
    CHECK(t[119] == 7.0f);
  }

  TEST_CASE("zero dims and wrong element counts are rejected") {
    CHECK_THROWS_AS(Tensor<float>({1, 0, 2, 2}), ShapeMismatch);
    CHECK_THROWS_AS(Tensor<float>({1, 1, 2, 2}, std::vector<float>(3)), ShapeMismatch);
  }

  TEST_CASE("top-left padding of a 3x3 image with k=2") {
    const auto x = from_rows(3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    const auto p = pad_oriented(x, Orientation::TL, 2);
    REQUIRE(p.shape() == Shape{1, 1, 4, 4});
    for (std::size_t j = 0; j < 4; ++j) CHECK(p(0, 0, 0, j) == 0.0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(p(0, 0, i, 0) == 0.0);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) CHECK(p(0, 0, i + 1, j + 1) == x(0, 0, i, j));
  }

  TEST_CASE("k=1 padding leaves the tensor unchanged") {
    const auto x = random_tensor<float>({2, 3, 4, 5}, 1);
    for (Orientation o : kAllOrientations) CHECK(pad_oriented(x, o, 1) == x);
  }

  TEST_CASE("bottom-right padding of a 2x2 image") {
    const auto p = pad_oriented(from_rows(2, 2, {1, 2, 3, 4}), Orientation::BR, 2);
    CHECK(p == from_rows(3, 3, {1, 2, 0, 3, 4, 0, 0, 0, 0}));
  }

  TEST_CASE("padded entries are +0.0 and the window holds x bit-exactly") {
    auto x = random_tensor<double>({2, 2, 5, 4}, 2);
    x[0] = -0.0;
    for (Orientation o : kAllOrientations)
      for (std::size_t k : {2, 3, 5}) {
        const auto p = pad_oriented(x, o, k);
        const std::size_t top = pads_top(o) ? k - 1 : 0;
        const std::size_t left = pads_left(o) ? k - 1 : 0;
        for (std::size_t n = 0; n < p.n(); ++n)
          for (std::size_t c = 0; c < p.c(); ++c)
            for (std::size_t h = 0; h < p.h(); ++h)
              for (std::size_t w = 0; w < p.w(); ++w) {
                const bool inside = h >= top && h < top + x.h() && w >= left && w < left + x.w();
                const double v = p(n, c, h, w);
                if (inside) {
                  const double e = x(n, c, h - top, w - left);
                  CHECK(std::memcmp(&v, &e, sizeof v) == 0);
                } else {
                  CHECK(v == 0.0);
                  CHECK_FALSE(std::signbit(v));
                }
              }
      }
  }

  TEST_CASE("corner paddings are flipped top-left paddings") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto x = random_tensor<float>({2, 3, 4 + seed % 3, 5}, seed);
      for (std::size_t k : {1, 2, 3, 4}) {
        CHECK(pad_oriented(x, Orientation::TR, k) ==
              flip(pad_oriented(flip(x, {false, true}), Orientation::TL, k), {false, true}));
        CHECK(pad_oriented(x, Orientation::BL, k) ==
              flip(pad_oriented(flip(x, {true, false}), Orientation::TL, k), {true, false}));
        CHECK(pad_oriented(x, Orientation::BR, k) ==
              flip(pad_oriented(flip(x, {true, true}), Orientation::TL, k), {true, true}));
      }
    }
  }

  TEST_CASE("flip along width") {
    CHECK(flip(from_rows(2, 2, {1, 2, 3, 4}), {false, true}) == from_rows(2, 2, {2, 1, 4, 3}));
    CHECK(flip(from_rows(2, 2, {1, 2, 3, 4}), {true, false}) == from_rows(2, 2, {3, 4, 1, 2}));
  }

  TEST_CASE("flip over no axes is the identity and each axis is an involution") {
    const auto x = random_tensor<double>({2, 3, 5, 7}, 3);
    CHECK(flip(x, {}) == x);
    CHECK(flip(flip(x, {true, true}), {true, true}) == x);
    CHECK(flip(flip(x, {true, false}), {true, false}) == x);
    CHECK(flip(flip(x, {false, true}), {false, true}) == x);
  }

  TEST_CASE("channel_split into four parts") {
    const auto x = random_tensor<float>({2, 8, 3, 3}, 4);
    const auto parts = channel_split(x, 4);
    REQUIRE(parts.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(parts[i].shape() == Shape{2, 2, 3, 3});
      CHECK(parts[i](1, 1, 2, 0) == x(1, 2 * i + 1, 2, 0));
    }
    CHECK(channel_concat(parts) == x);
  }

  TEST_CASE("channel_split with one part returns x") {
    const auto x = random_tensor<float>({1, 3, 2, 2}, 5);
    const auto parts = channel_split(x, 1);
    REQUIRE(parts.size() == 1);
    CHECK(parts[0] == x);
  }

  TEST_CASE("channel_split rejects indivisible counts") {
    CHECK_THROWS_AS(channel_split(Tensor<float>({1, 6, 2, 2}), 4), IndivisibleChannels);
  }

  TEST_CASE("channel_concat stacks along channels and checks shapes") {
    const Tensor<double> a({1, 1, 2, 2}, 1.0), b({1, 1, 2, 2}, 2.0);
    const auto c = channel_concat({a, b});
    CHECK(c.shape() == Shape{1, 2, 2, 2});
    CHECK(c(0, 0, 1, 1) == 1.0);
    CHECK(c(0, 1, 0, 0) == 2.0);
    CHECK_THROWS_AS(channel_concat({a, Tensor<double>({1, 1, 3, 2})}), ShapeMismatch);
  }

  TEST_CASE("split then concat round trips for every divisor") {
    const auto x = random_tensor<double>({3, 12, 4, 2}, 6);
    for (std::size_t parts : {1, 2, 3, 4, 6, 12}) CHECK(channel_concat(channel_split(x, parts)) == x);
  }
}

TEST_SUITE("tensor-core io") {
  template <typename T>
  void check_round_trip(const testutil::TempDir& dir) {
    auto x = random_tensor<T>({2, 3, 4, 5}, 7);
    x[0] = T(-0.0);
    x[1] = std::numeric_limits<T>::denorm_min();
    x[2] = -std::numeric_limits<T>::denorm_min() * T(3);
    x[3] = std::numeric_limits<T>::max();
    x[4] = std::numeric_limits<T>::infinity();
    const auto path = dir / "x.ften";
    write_tensor(path, x);
    const auto back = std::get<Tensor<T>>(read_tensor(path));
    REQUIRE(back.shape() == x.shape());
    CHECK(std::memcmp(back.raw(), x.raw(), x.size() * sizeof(T)) == 0);
    CHECK(std::filesystem::file_size(path) == 29 + x.size() * sizeof(T));
  }

  TEST_CASE("file round trip is bit-exact for both dtypes") {
    testutil::TempDir dir("io");
    check_round_trip<float>(dir);
    check_round_trip<double>(dir);
  }

  TEST_CASE("header bytes follow the documented layout") {
    testutil::TempDir dir("io");
    const Tensor<float> x({1, 2, 3, 4}, 1.5f);
    write_tensor(dir / "h.ften", x);
    std::ifstream in(dir / "h.ften", std::ios::binary);
    std::vector<unsigned char> b(29);
    in.read(reinterpret_cast<char*>(b.data()), 29);
    CHECK(std::memcmp(b.data(), "FINCTEN\0", 8) == 0);
    CHECK(b[8] == 1);
    for (int i = 9; i < 13; ++i) CHECK(b[i] == 0);
    CHECK(b[13] == 1);
    CHECK(b[17] == 2);
    CHECK(b[21] == 3);
    CHECK(b[25] == 4);
  }

  TEST_CASE("wrong magic is BadMagic") {
    testutil::TempDir dir("io");
    write_tensor(dir / "m.ften", Tensor<float>({1, 1, 1, 1}));
    {
      std::fstream f(dir / "m.ften", std::ios::binary | std::ios::in | std::ios::out);
      f.write("NOTATEN", 7);
    }
    CHECK_THROWS_AS(read_tensor(dir / "m.ften"), BadMagic);
  }

  TEST_CASE("short body is TruncatedFile") {
    testutil::TempDir dir("io");
    const auto path = dir / "t.ften";
    write_tensor(path, Tensor<float>({1, 1, 10, 10}));
    std::filesystem::resize_file(path, 29 + 50 * sizeof(float));
    CHECK_THROWS_AS(read_tensor(path), TruncatedFile);
    std::filesystem::resize_file(path, 20);
    CHECK_THROWS_AS(read_tensor(path), TruncatedFile);
  }

  TEST_CASE("unknown dtype code is UnsupportedDtype") {
    testutil::TempDir dir("io");
    const auto path = dir / "d.ften";
    write_tensor(path, Tensor<float>({1, 1, 1, 1}));
    {
      std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
      f.seekp(8);
      f.put(static_cast<char>(3));
    }
    CHECK_THROWS_AS(read_tensor(path), UnsupportedDtype);
  }

  TEST_CASE("read_tensor_as converts between dtypes") {
    testutil::TempDir dir("io");
    const Tensor<float> x({1, 1, 1, 2}, std::vector<float>{0.5f, -2.0f});
    write_tensor(dir / "c.ften", x);
    const auto d = read_tensor_as<double>(dir / "c.ften");
    CHECK(d[0] == 0.5);
    CHECK(d[1] == -2.0);
  }
}
