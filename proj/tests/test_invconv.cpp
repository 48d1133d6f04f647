#include <doctest.h>

#include <random>

#include "fincflow/dense_oracle.hpp"
#include "fincflow/invconv.hpp"
#include "helpers.hpp"

using namespace fincflow;
using testutil::integer_tensor;
using testutil::random_tensor;

namespace {

// C=1, k=2, TL kernel [[a, b], [c, 1]] with (a, b, c) = (1, 2, 3).
MaskedKernel<double> small_kernel() {
  return {Tensor<double>({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 1}), Orientation::TL};
}

Tensor<double> small_x() { return Tensor<double>({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}); }
Tensor<double> small_y() { return Tensor<double>({1, 1, 2, 2}, std::vector<double>{1, 5, 5, 18}); }

MaskedKernel<double> random_kernel(std::size_t c, std::size_t k, Orientation o, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return MaskedKernel<double>::random(c, k, o, rng);
}

// Madds of one output element at (h, w) of a TL block: in-bounds taps other
// than the anchor, times the channel count.
std::uint64_t tl_element_madds(std::size_t h, std::size_t w, std::size_t k, std::size_t c) {
  return (std::min(h + 1, k) * std::min(w + 1, k) - 1) * c;
}

}  // namespace

TEST_SUITE("invconv forward") {
  TEST_CASE("2x2 single-channel example") {
    CHECK(pcb_forward(small_x(), small_kernel()) == small_y());
  }

  TEST_CASE("identity kernel gives y == x bit-exactly") {
    const auto x = random_tensor<double>({2, 3, 5, 6}, 1);
    for (Orientation o : kAllOrientations)
      for (std::size_t k : {1, 2, 3, 5}) CHECK(pcb_forward(x, MaskedKernel<double>::identity(3, k, o)) == x);
  }

  TEST_CASE("forward equals the dense matrix times the vectorized input") {
    for (Orientation o : kAllOrientations) {
      const auto pcb = random_kernel(3, 3, o, 2);
      const auto x = random_tensor<double>({2, 3, 5, 4}, 3);
      const auto y = pcb_forward(x, pcb);
      const ConvMatrix m = build_conv_matrix(pcb, 5, 4);
      for (std::size_t n = 0; n < 2; ++n) {
        const auto mx = matvec(m, vectorize(x, n, o));
        const auto yv = vectorize(y, n, o);
        for (std::size_t i = 0; i < yv.size(); ++i) CHECK(std::abs(mx[i] - yv[i]) <= 1e-12);
      }
    }
  }

  TEST_CASE("each orientation is a flipped top-left forward, exactly") {
    for (Orientation o : kAllOrientations)
      for (std::size_t k : {2, 3, 4}) {
        MaskedKernel<double> pcb{integer_tensor<double>({3, 3, k, k}, 10 + k), o};
        pcb = apply_anchor_mask(pcb);
        const auto x = integer_tensor<double>({2, 3, 6, 5}, 20 + k);
        const FlipAxes f = flips_to_tl(o);
        CHECK(pcb_forward(x, pcb) == flip(pcb_forward(flip(x, f), to_top_left(pcb)), f));
      }
  }

  TEST_CASE("channel mismatch is ShapeMismatch") {
    CHECK_THROWS_AS(pcb_forward(Tensor<double>({1, 2, 3, 3}), MaskedKernel<double>::identity(3, 2, Orientation::TL)),
                    ShapeMismatch);
  }

  TEST_CASE("backward is the transpose of the dense matrix and exact in the weights") {
    const auto pcb = random_kernel(2, 3, Orientation::BL, 4);
    const auto x = random_tensor<double>({1, 2, 4, 3}, 5);
    const auto gy = random_tensor<double>({1, 2, 4, 3}, 6);
    Tensor<double> gw(pcb.weights.shape());
    const auto gx = pcb_backward(x, gy, pcb, gw);

    const ConvMatrix m = build_conv_matrix(pcb, 4, 3);
    const auto gyv = vectorize(gy, 0, pcb.orientation);
    const auto gxv = vectorize(gx, 0, pcb.orientation);
    for (std::size_t col = 0; col < m.dim(); ++col) {
      double s = 0.0;
      for (std::size_t row = 0; row < m.dim(); ++row) s += m.at(row, col) * gyv[row];
      CHECK(std::abs(s - gxv[col]) <= 1e-12);
    }

    // y is linear in the weights, so a unit step gives the exact derivative.
    const auto dot = [&](const MaskedKernel<double>& k) {
      const auto y = pcb_forward(x, k);
      double s = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * gy[i];
      return s;
    };
    const double base = dot(pcb);
    for (std::size_t i = 0; i < gw.size(); ++i) {
      auto bumped = pcb;
      bumped.weights[i] += 1.0;
      CHECK(dot(bumped) - base == doctest::Approx(gw[i]).epsilon(1e-10));
    }
  }
}

TEST_SUITE("invconv dense oracle") {
  TEST_CASE("3x3 single-channel top-left matrix") {
    const auto pcb = small_kernel();
    const ConvMatrix m = build_conv_matrix(pcb, 3, 3);
    REQUIRE(m.dim() == 9);
    CHECK(is_unit_lower_triangular(m));
    // Row of pixel (1, 1) reads pixels (0,0), (0,1), (1,0) and itself.
    const std::size_t r = 4;
    CHECK(m.at(r, 0) == 1.0);
    CHECK(m.at(r, 1) == 2.0);
    CHECK(m.at(r, 3) == 3.0);
    CHECK(m.at(r, 4) == 1.0);
    CHECK(m.at(r, 2) == 0.0);
    CHECK(max_row_nonzeros(m) == 4);
  }

  TEST_CASE("identity kernel gives the identity matrix") {
    for (Orientation o : kAllOrientations) {
      const ConvMatrix m = build_conv_matrix(MaskedKernel<double>::identity(2, 3, o), 3, 4);
      for (std::size_t r = 0; r < m.dim(); ++r)
        for (std::size_t c = 0; c < m.dim(); ++c) CHECK(m.at(r, c) == (r == c ? 1.0 : 0.0));
    }
  }

  TEST_CASE("random masked kernels give unit lower-triangular matrices with det 1") {
    for (Orientation o : kAllOrientations)
      for (std::size_t k : {2, 3, 5}) {
        const auto pcb = random_kernel(3, k, o, 30 + k);
        const ConvMatrix m = build_conv_matrix(pcb, 6, 5);
        CHECK(is_unit_lower_triangular(m));
        CHECK(triangular_determinant(m) == 1.0);
        CHECK(max_row_nonzeros(m) <= k * k * 3);
      }
  }

  TEST_CASE("a perturbed anchor breaks the unit diagonal") {
    auto pcb = random_kernel(2, 3, Orientation::TR, 7);
    const auto [p, q] = anchor_tap(Orientation::TR, 3);
    pcb.weights(0, 0, p, q) = 1.1;
    CHECK_FALSE(is_unit_lower_triangular(build_conv_matrix(pcb, 4, 4)));
  }

  TEST_CASE("dense storage is capped") {
    CHECK_THROWS_AS(build_conv_matrix(MaskedKernel<double>::identity(4, 3, Orientation::TL), 32, 33), TooLargeForDense);
    CHECK_NOTHROW(build_conv_matrix(MaskedKernel<double>::identity(4, 3, Orientation::TL), 32, 32));
  }

  TEST_CASE("vectorize and devectorize are inverse") {
    const auto x = random_tensor<double>({1, 3, 4, 5}, 8);
    for (Orientation o : kAllOrientations) CHECK(devectorize(vectorize(x, 0, o), 3, 4, 5, o) == x);
  }
}

TEST_SUITE("invconv inverse") {
  TEST_CASE("reference inverts the 2x2 example") {
    CHECK(pcb_invert_reference(small_y(), small_kernel()) == small_x());
  }

  TEST_CASE("identity kernel inverts to y bit-exactly") {
    const auto y = random_tensor<double>({2, 2, 4, 4}, 9);
    for (Orientation o : kAllOrientations) {
      const auto id = MaskedKernel<double>::identity(2, 3, o);
      CHECK(pcb_invert_reference(y, id) == y);
      CHECK(pcb_invert_wavefront(y, id, 2) == y);
    }
  }

  TEST_CASE("reference matches the dense triangular solve") {
    for (Orientation o : kAllOrientations) {
      const auto pcb = random_kernel(4, 3, o, 11);
      const auto y = random_tensor<double>({1, 4, 8, 8}, 12);
      const auto x = pcb_invert_reference(y, pcb);
      const auto xd = devectorize(solve_lower(build_conv_matrix(pcb, 8, 8), vectorize(y, 0, o)), 4, 8, 8, o);
      CHECK(max_abs_diff(x, xd) <= 1e-9);
    }
  }

  TEST_CASE("wavefront inverts the 2x2 example in three phases") {
    InversionStats stats;
    CHECK(pcb_invert_wavefront(small_y(), small_kernel(), 1, &stats) == small_x());
    CHECK(stats.phases == 3);
  }

  TEST_CASE("32x32, k=3: 63 phases and at most 9C madds per element") {
    const auto pcb = random_kernel(4, 3, Orientation::TL, 13);
    const auto y = random_tensor<double>({1, 4, 32, 32}, 14);
    InversionStats stats;
    pcb_invert_wavefront(y, pcb, 2, &stats);
    CHECK(stats.phases == 63);
    CHECK(stats.max_element_madds <= 9 * 4);
  }

  TEST_CASE("madd count equals the in-bounds non-anchor taps") {
    for (std::size_t k : {2, 3, 5}) {
      const std::size_t C = 3, H = 7, W = 5, N = 2;
      std::uint64_t expected = 0;
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) expected += tl_element_madds(h, w, k, C) * C * N;
      for (Orientation o : kAllOrientations) {
        const auto pcb = random_kernel(C, k, o, 15);
        const auto y = random_tensor<double>({N, C, H, W}, 16);
        InversionStats wave, ref;
        pcb_invert_wavefront(y, pcb, 3, &wave);
        pcb_invert_reference(y, pcb, &ref);
        CHECK(wave.madds == expected);
        CHECK(ref.madds == expected);
        CHECK(wave.max_element_madds == tl_element_madds(H - 1, W - 1, k, C));
        CHECK(wave.phases == H + W - 1);
      }
    }
  }

  TEST_CASE("wavefront matches reference and is independent of the worker count") {
    for (Orientation o : kAllOrientations) {
      const auto pcb = random_kernel(3, 3, o, 17);
      const auto y = random_tensor<double>({3, 3, 9, 7}, 18);
      const auto x1 = pcb_invert_wavefront(y, pcb, 1);
      CHECK(max_abs_diff(x1, pcb_invert_reference(y, pcb)) <= 1e-9);
      for (int w : {2, 3, 4, 8}) CHECK(pcb_invert_wavefront(y, pcb, w) == x1);
    }
  }

  TEST_CASE("f32 round trip") {
    for (Orientation o : kAllOrientations) {
      std::mt19937_64 rng(19);
      const auto pcb = MaskedKernel<float>::random(4, 5, o, rng);
      const auto x = random_tensor<float>({2, 4, 16, 16}, 20);
      CHECK(max_abs_diff(pcb_invert_wavefront(pcb_forward(x, pcb), pcb, 2), x) <= 1e-4);
    }
  }

  TEST_CASE("bad worker counts and shapes are rejected") {
    const auto pcb = random_kernel(2, 3, Orientation::TL, 21);
    CHECK_THROWS_AS(pcb_invert_wavefront(Tensor<double>({1, 2, 3, 3}), pcb, 0), InvalidConfig);
    CHECK_THROWS_AS(pcb_invert_wavefront(Tensor<double>({1, 3, 3, 3}), pcb, 1), ShapeMismatch);
    CHECK_THROWS_AS(pcb_invert_reference(Tensor<double>({1, 3, 3, 3}), pcb), ShapeMismatch);
  }
}

TEST_SUITE("invconv unit") {
  TEST_CASE("identity unit passes x through with zero logdet") {
    const auto x = random_tensor<double>({2, 8, 6, 6}, 22);
    const auto unit = FincFlowUnit<double>::identity(8, 3);
    const auto out = unit_forward(x, unit);
    CHECK(out.y == x);
    CHECK(out.logdet == 0.0);
    CHECK(unit_invert(x, unit, 2) == x);
  }

  TEST_CASE("blocks follow the TL, TR, BR, BL quarter order") {
    const auto unit = FincFlowUnit<double>::identity(8, 3);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(unit.blocks[i].orientation == kUnitOrientations[i]);
      CHECK(unit.blocks[i].channels() == 2);
    }
    CHECK(kUnitOrientations[1] == Orientation::TR);
    CHECK(kUnitOrientations[2] == Orientation::BR);
  }

  TEST_CASE("random unit reports logdet exactly 0.0") {
    std::mt19937_64 rng(23);
    const auto unit = FincFlowUnit<double>::random(8, 3, rng);
    CHECK(unit_forward(random_tensor<double>({1, 8, 5, 5}, 24), unit).logdet == 0.0);
  }

  TEST_CASE("unit forward is block diagonal in the four dense matrices") {
    std::mt19937_64 rng(25);
    const auto unit = FincFlowUnit<double>::random(8, 2, rng);
    const auto x = random_tensor<double>({1, 8, 4, 4}, 26);
    const auto y = unit_forward(x, unit).y;
    const auto xs = channel_split(x, 4);
    const auto ys = channel_split(y, 4);
    for (std::size_t i = 0; i < 4; ++i) {
      const Orientation o = unit.blocks[i].orientation;
      const auto mx = matvec(build_conv_matrix(unit.blocks[i], 4, 4), vectorize(xs[i], 0, o));
      const auto yv = vectorize(ys[i], 0, o);
      for (std::size_t j = 0; j < yv.size(); ++j) CHECK(std::abs(mx[j] - yv[j]) <= 1e-9);
    }
  }

  TEST_CASE("f32 round trip on 8-channel 16x16 inputs") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      std::mt19937_64 rng(seed);
      const auto unit = FincFlowUnit<float>::random(8, 3, rng);
      const auto x = random_tensor<float>({2, 8, 16, 16}, 100 + seed);
      CHECK(max_abs_diff(unit_invert(unit_forward(x, unit).y, unit, 2), x) <= 1e-4);
    }
  }

  TEST_CASE("batched inversion equals four reference inversions in one wavefront") {
    std::mt19937_64 rng(27);
    const auto unit = FincFlowUnit<double>::random(12, 3, rng);
    const auto y = random_tensor<double>({2, 12, 9, 6}, 28);
    InversionStats stats;
    const auto x = unit_invert(y, unit, 3, &stats);
    CHECK(stats.phases == 9 + 6 - 1);
    const auto ys = channel_split(y, 4);
    std::vector<Tensor<double>> parts;
    for (std::size_t i = 0; i < 4; ++i) parts.push_back(pcb_invert_reference(ys[i], unit.blocks[i]));
    CHECK(max_abs_diff(x, channel_concat(parts)) <= 1e-9);
    CHECK(max_abs_diff(x, unit_invert_reference(y, unit)) <= 1e-9);
    CHECK(unit_invert(y, unit, 1) == x);
  }

  TEST_CASE("units need channels divisible by 4") {
    CHECK_THROWS_AS(FincFlowUnit<double>::identity(6, 3), IndivisibleChannels);
    const auto unit = FincFlowUnit<double>::identity(8, 3);
    CHECK_THROWS_AS(unit_forward(Tensor<double>({1, 6, 4, 4}), unit), Error);
  }

  TEST_CASE("unit backward matches per-block backward") {
    std::mt19937_64 rng(29);
    const auto unit = FincFlowUnit<double>::random(8, 3, rng);
    const auto x = random_tensor<double>({1, 8, 4, 5}, 30);
    const auto gy = random_tensor<double>({1, 8, 4, 5}, 31);
    std::array<Tensor<double>, 4> gw;
    for (std::size_t i = 0; i < 4; ++i) gw[i] = Tensor<double>(unit.blocks[i].weights.shape());
    const auto gx = unit_backward(x, gy, unit, gw);
    const auto xs = channel_split(x, 4), gys = channel_split(gy, 4), gxs = channel_split(gx, 4);
    for (std::size_t i = 0; i < 4; ++i) {
      Tensor<double> g(unit.blocks[i].weights.shape());
      CHECK(pcb_backward(xs[i], gys[i], unit.blocks[i], g) == gxs[i]);
      CHECK(g == gw[i]);
    }
  }
}

TEST_SUITE("invconv anchor mask") {
  TEST_CASE("anchor taps sit at the pixel's own position") {
    CHECK(anchor_tap(Orientation::TL, 3) == std::pair<std::size_t, std::size_t>{2, 2});
    CHECK(anchor_tap(Orientation::TR, 3) == std::pair<std::size_t, std::size_t>{2, 0});
    CHECK(anchor_tap(Orientation::BL, 3) == std::pair<std::size_t, std::size_t>{0, 2});
    CHECK(anchor_tap(Orientation::BR, 3) == std::pair<std::size_t, std::size_t>{0, 0});
  }

  TEST_CASE("mask sets the anchor to identity and leaves other taps") {
    for (Orientation o : kAllOrientations) {
      MaskedKernel<double> raw{random_tensor<double>({3, 3, 3, 3}, 32), o};
      const auto masked = apply_anchor_mask(raw);
      CHECK(anchor_is_identity(masked));
      CHECK_FALSE(anchor_is_identity(raw));
      const auto [p, q] = anchor_tap(o, 3);
      for (std::size_t co = 0; co < 3; ++co)
        for (std::size_t ci = 0; ci < 3; ++ci)
          for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j)
              if (i != p || j != q) CHECK(masked.weights(co, ci, i, j) == raw.weights(co, ci, i, j));
      CHECK(apply_anchor_mask(masked).weights == masked.weights);
    }
  }

  TEST_CASE("masked gradients are exactly zero at the anchor") {
    for (Orientation o : kAllOrientations) {
      auto g = random_tensor<double>({2, 2, 3, 3}, 33);
      zero_anchor(g, o);
      const auto [p, q] = anchor_tap(o, 3);
      for (std::size_t co = 0; co < 2; ++co)
        for (std::size_t ci = 0; ci < 2; ++ci) CHECK(g(co, ci, p, q) == 0.0);
    }
  }

  TEST_CASE("random kernels draw off-anchor taps within 0.5 / k^2") {
    const auto pcb = random_kernel(4, 5, Orientation::BR, 34);
    const auto [p, q] = anchor_tap(Orientation::BR, 5);
    for (std::size_t co = 0; co < 4; ++co)
      for (std::size_t ci = 0; ci < 4; ++ci)
        for (std::size_t i = 0; i < 5; ++i)
          for (std::size_t j = 0; j < 5; ++j)
            if (i != p || j != q) CHECK(std::abs(pcb.weights(co, ci, i, j)) <= 0.5 / 25);
  }
}
