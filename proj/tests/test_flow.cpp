#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <numbers>
#include <set>

#include "fincflow/check.hpp"
#include "fincflow/flow.hpp"
#include "helpers.hpp"

using namespace fincflow;
using testutil::random_tensor;

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

// log|det| of the central-difference Jacobian of f at x.
double numeric_logdet(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x,
                      double eps = 1e-5) {
  const auto D = static_cast<Eigen::Index>(x.size());
  Eigen::MatrixXd J(D, D);
  Tensor<double> probe = x;
  for (Eigen::Index j = 0; j < D; ++j) {
    const double saved = probe[j];
    probe[j] = saved + eps;
    const auto up = f(probe);
    probe[j] = saved - eps;
    const auto down = f(probe);
    probe[j] = saved;
    for (Eigen::Index i = 0; i < D; ++i) J(i, j) = (up[i] - down[i]) / (2 * eps);
  }
  return std::log(std::abs(J.determinant()));
}

template <typename T>
void randomize(Tensor<T>& t, std::uint64_t seed, double scale) {
  t = random_tensor<T>(t.shape(), seed, scale);
}

}  // namespace

TEST_SUITE("flow actnorm") {
  TEST_CASE("unit scale and zero bias is the identity") {
    ActNorm<double> a(3);
    a.initialized = true;
    const auto x = random_tensor<double>({2, 3, 4, 4}, 1);
    LogVec ld(2, 0.0);
    CHECK(a.forward(x, ld) == x);
    CHECK(ld == LogVec{0.0, 0.0});
  }

  TEST_CASE("scale 2 on a 4x4x1 input gives 16 log 2 per sample") {
    ActNorm<double> a(1);
    a.initialized = true;
    a.scale.fill(2.0);
    LogVec ld(3, 0.0);
    a.forward(random_tensor<double>({3, 1, 4, 4}, 2), ld);
    for (double v : ld) CHECK(v == doctest::Approx(16 * std::log(2.0)).epsilon(1e-14));
  }

  TEST_CASE("f32 round trip") {
    ActNorm<float> a(4);
    a.initialized = true;
    randomize(a.scale, 3, 1.0);
    randomize(a.bias, 4, 1.0);
    const auto x = random_tensor<float>({2, 4, 5, 5}, 5);
    LogVec ld(2, 0.0);
    CHECK(max_abs_diff(a.inverse(a.forward(x, ld)), x) <= 1e-6);
  }

  TEST_CASE("first batch initializes to zero mean and unit variance") {
    ActNorm<double> a(2);
    auto x = random_tensor<double>({4, 2, 6, 6}, 6, 3.0);
    for (auto& v : x.data()) v += 5.0;
    LogVec ld(4, 0.0);
    const auto y = a.forward(x, ld);
    CHECK(a.initialized);
    for (std::size_t c = 0; c < 2; ++c) {
      double sum = 0, sq = 0;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 36; ++i) {
          const double v = y(n, c, i / 6, i % 6);
          sum += v;
          sq += v * v;
        }
      CHECK(std::abs(sum / 144) <= 1e-12);
      CHECK(sq / 144 == doctest::Approx(1.0).epsilon(1e-5));
    }
  }

  TEST_CASE("zero scale is rejected") {
    ActNorm<double> a(2);
    a.initialized = true;
    a.scale[1] = 0.0;
    LogVec ld(1, 0.0);
    CHECK_THROWS_AS(a.forward(Tensor<double>({1, 2, 2, 2}), ld), ZeroScale);
    CHECK_THROWS_AS(a.inverse(Tensor<double>({1, 2, 2, 2})), ZeroScale);
  }

  TEST_CASE("logdet gradient with respect to scale is H*W/scale") {
    ActNorm<double> a(3);
    a.initialized = true;
    a.scale = Tensor<double>({3, 1, 1, 1}, std::vector<double>{0.5, 2.0, -3.0});
    LogVec ld(1, 0.0);
    a.forward(random_tensor<double>({1, 3, 4, 5}, 7), ld);
    a.backward(Tensor<double>({1, 3, 4, 5}), 1.0);
    for (std::size_t c = 0; c < 3; ++c) CHECK(a.grad_scale[c] == doctest::Approx(20.0 / a.scale[c]));
  }

  TEST_CASE("backward before forward is MissingCache") {
    ActNorm<double> a(1);
    CHECK_THROWS_AS(a.backward(Tensor<double>({1, 1, 1, 1}), 1.0), MissingCache);
  }
}

TEST_SUITE("flow inv1x1") {
  TEST_CASE("identity weight") {
    std::mt19937_64 rng(1);
    Inv1x1<double> l(3, rng);
    l.weight = Tensor<double>({3, 3, 1, 1});
    for (std::size_t i = 0; i < 3; ++i) l.weight(i, i, 0, 0) = 1.0;
    const auto x = random_tensor<double>({2, 3, 3, 3}, 2);
    LogVec ld(2, 0.0);
    CHECK(l.forward(x, ld) == x);
    CHECK(ld[0] == 0.0);
  }

  TEST_CASE("rotation: zero logdet and the transpose inverts") {
    std::mt19937_64 rng(1);
    Inv1x1<double> l(2, rng);
    const double t = 0.7;
    l.weight = Tensor<double>({2, 2, 1, 1}, std::vector<double>{std::cos(t), -std::sin(t), std::sin(t), std::cos(t)});
    const auto x = random_tensor<double>({1, 2, 3, 4}, 3);
    LogVec ld(1, 0.0);
    const auto y = l.forward(x, ld);
    CHECK(std::abs(ld[0]) <= 1e-12);
    Inv1x1<double> tr = l;
    tr.weight = Tensor<double>({2, 2, 1, 1}, std::vector<double>{std::cos(t), std::sin(t), -std::sin(t), std::cos(t)});
    LogVec ld2(1, 0.0);
    CHECK(max_abs_diff(tr.forward(y, ld2), x) <= 1e-12);
    CHECK(max_abs_diff(l.inverse(y), x) <= 1e-12);
  }

  TEST_CASE("logdet is H*W*log|det W| for a hand-computed matrix") {
    std::mt19937_64 rng(1);
    Inv1x1<double> l(2, rng);
    l.weight = Tensor<double>({2, 2, 1, 1}, std::vector<double>{2, 1, 0, -3});
    LogVec ld(1, 0.0);
    l.forward(random_tensor<double>({1, 2, 3, 5}, 4), ld);
    CHECK(ld[0] == doctest::Approx(15 * std::log(6.0)).epsilon(1e-14));
  }

  TEST_CASE("orthogonal initialization and f32 round trip") {
    std::mt19937_64 rng(5);
    Inv1x1<float> l(8, rng);
    CHECK(std::abs(l.log_abs_det()) <= 1e-5);
    const auto x = random_tensor<float>({2, 8, 4, 4}, 6);
    LogVec ld(2, 0.0);
    CHECK(max_abs_diff(l.inverse(l.forward(x, ld)), x) <= 1e-5);
  }

  TEST_CASE("singular weight is rejected") {
    std::mt19937_64 rng(1);
    Inv1x1<double> l(2, rng);
    l.weight = Tensor<double>({2, 2, 1, 1}, std::vector<double>{1, 2, 2, 4});
    LogVec ld(1, 0.0);
    CHECK_THROWS_AS(l.forward(Tensor<double>({1, 2, 1, 1}), ld), SingularWeight);
    CHECK_THROWS_AS(l.inverse(Tensor<double>({1, 2, 1, 1})), SingularWeight);
  }
}

TEST_SUITE("flow coupling") {
  TEST_CASE("zero-initialized output conv makes the layer the identity") {
    std::mt19937_64 rng(1);
    Coupling<double> c(4, 16, rng);
    const auto x = random_tensor<double>({2, 4, 5, 5}, 2);
    LogVec ld(2, 0.0);
    CHECK(max_abs_diff(c.forward(x, ld), x) == 0.0);
    CHECK(ld == LogVec{0.0, 0.0});
  }

  TEST_CASE("f32 round trip for random nets") {
    std::mt19937_64 rng(3);
    Coupling<float> c(8, 16, rng);
    randomize(c.w3, 4, 0.05);
    randomize(c.b3, 5, 0.5);
    const auto x = random_tensor<float>({2, 8, 6, 6}, 6);
    LogVec ld(2, 0.0);
    const auto y = c.forward(x, ld);
    CHECK(max_abs_diff(y, x) > 1e-2);
    CHECK(max_abs_diff(c.inverse(y), x) <= 1e-5);
    CHECK(channel_slice(y, 0, 4) == channel_slice(x, 0, 4));
  }

  TEST_CASE("logdet matches the finite-difference Jacobian on 1x4x4x4") {
    std::mt19937_64 rng(7);
    Coupling<double> c(4, 8, rng);
    randomize(c.w3, 8, 0.2);
    randomize(c.b3, 9, 0.5);
    const auto x = random_tensor<double>({1, 4, 4, 4}, 10);
    LogVec ld(1, 0.0);
    c.forward(x, ld);
    const double numeric = numeric_logdet([&](const Tensor<double>& v) {
      LogVec scratch(1, 0.0);
      return c.forward(v, scratch);
    }, x);
    CHECK(std::abs(numeric - ld[0]) <= 1e-3);
  }

  TEST_CASE("scale stays in (0, 2) for extreme raw outputs") {
    std::mt19937_64 rng(11);
    Coupling<double> c(2, 4, rng);
    c.b3 = Tensor<double>({2, 1, 1, 1}, std::vector<double>{0.0, 500.0});
    Tensor<double> x({1, 2, 1, 1}, std::vector<double>{0.3, 1.0});
    LogVec ld(1, 0.0);
    const auto y = c.forward(x, ld);
    CHECK(std::isfinite(ld[0]));
    CHECK(y[1] <= 2.0);
    c.b3[1] = -500.0;
    LogVec ld2(1, 0.0);
    const auto y2 = c.forward(x, ld2);
    CHECK(std::isfinite(ld2[0]));
    CHECK(y2[1] >= 0.0);
  }

  TEST_CASE("odd channel counts are rejected") {
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(Coupling<double>(3, 4, rng), OddChannels);
  }
}

TEST_SUITE("flow squeeze and split") {
  TEST_CASE("squeeze shape and layout") {
    const auto x = random_tensor<double>({1, 1, 4, 4}, 1);
    const auto y = squeeze(x);
    CHECK(y.shape() == Shape{1, 4, 2, 2});
    for (std::size_t dy = 0; dy < 2; ++dy)
      for (std::size_t dx = 0; dx < 2; ++dx) CHECK(y(0, 2 * dy + dx, 1, 0) == x(0, 0, 2 + dy, dx));
  }

  TEST_CASE("unsqueeze inverts squeeze bit-exactly") {
    const auto x = random_tensor<float>({2, 3, 6, 4}, 2);
    CHECK(unsqueeze(squeeze(x)) == x);
  }

  TEST_CASE("odd spatial dims are rejected") {
    CHECK_THROWS_AS(squeeze(Tensor<double>({1, 3, 5, 4})), OddSpatialDims);
  }

  TEST_CASE("zero-init prior gives the standard normal density") {
    Split<double> s(4);
    const auto x = random_tensor<double>({2, 4, 3, 3}, 3);
    LogVec lp(2, 0.0);
    const auto out = s.forward(x, lp);
    for (std::size_t n = 0; n < 2; ++n) {
      double expected = 0.0;
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 9; ++i) {
          const double z = out.z(n, c, i / 3, i % 3);
          expected += -kHalfLog2Pi - 0.5 * z * z;
        }
      CHECK(lp[n] == doctest::Approx(expected).epsilon(1e-14));
    }
  }

  TEST_CASE("z = 0 with eight elements gives 8 * -log(2 pi) / 2") {
    Split<double> s(2);
    auto x = random_tensor<double>({1, 2, 2, 4}, 4);
    for (std::size_t i = 0; i < 8; ++i) x(0, 1, i / 4, i % 4) = 0.0;
    LogVec lp(1, 0.0);
    s.forward(x, lp);
    CHECK(lp[0] == doctest::Approx(-8 * kHalfLog2Pi).epsilon(1e-14));
  }

  TEST_CASE("split then inverse is bit-exact") {
    Split<double> s(6);
    randomize(s.weight, 5, 0.1);
    const auto x = random_tensor<double>({2, 6, 4, 4}, 6);
    LogVec lp(2, 0.0);
    const auto out = s.forward(x, lp);
    CHECK(s.inverse(out.retained, out.z) == x);
  }

  TEST_CASE("odd channels are rejected") { CHECK_THROWS_AS(Split<double>(3), OddChannels); }
}

TEST_SUITE("flow model") {
  TEST_CASE("config validation") {
    CHECK_NOTHROW(ModelConfig{2, 1, 4, 8, 8, 8, 3}.validate());
    CHECK_THROWS_AS((ModelConfig{3, 1, 4, 12, 12, 8, 3}.validate()), InvalidConfig);
    CHECK_THROWS_AS((ModelConfig{1, 0, 4, 8, 8, 8, 3}.validate()), InvalidConfig);
  }

  TEST_CASE("identity-acting model: zero logdet, latents hold x") {
    FlowModel<double> m({2, 2, 4, 8, 8, 8, 3}, 1);
    m.make_identity();
    const auto x = random_tensor<double>({2, 4, 8, 8}, 2);
    const auto f = m.forward(x);
    CHECK(f.logdet_total() == 0.0);
    std::size_t count = 0;
    for (const auto& z : f.latents) count += z.size();
    CHECK(count == x.size());
    CHECK(m.inverse(f.latents) == x);
  }

  TEST_CASE("latent count equals input count for every valid config") {
    for (std::size_t L : {1, 2, 3})
      for (std::size_t C : {1, 3, 4}) {
        FlowModel<float> m({L, 1, C, 16, 8, 4, 2}, 3);
        const auto x = random_tensor<float>({1, C, 16, 8}, 4);
        std::size_t count = 0;
        for (const auto& z : m.forward(x).latents) count += z.size();
        CHECK(count == x.size());
        std::size_t shape_count = 0;
        for (const auto& s : m.latent_shapes(1)) shape_count += s.size();
        CHECK(shape_count == x.size());
      }
  }

  TEST_CASE("wrong input dims are ShapeMismatch") {
    FlowModel<float> m({1, 1, 4, 8, 8, 4, 3}, 5);
    CHECK_THROWS_AS(m.forward(Tensor<float>({1, 4, 8, 4})), ShapeMismatch);
    CHECK_THROWS_AS(m.backward(), MissingCache);
  }

  TEST_CASE("logdet plus prior matches the finite-difference change of variables") {
    const ModelConfig cfg{1, 2, 4, 4, 4, 8, 3};
    const auto x = random_tensor<double>({1, 4, 4, 4}, 6);
    auto m = make_toy_model(cfg, x, 7);
    const auto r = jacobian_check(m, x);
    CHECK(r.error <= 1e-3);
    CHECK(std::abs(r.analytic) > 1e-2);
  }

  TEST_CASE("inverse recovers x across the config grid") {
    for (std::size_t L : {1, 2})
      for (std::size_t K : {1, 4})
        for (std::size_t C : {4, 8})
          for (std::size_t S : {8, 16}) {
            CAPTURE(L);
            CAPTURE(K);
            CAPTURE(C);
            CAPTURE(S);
            FlowModel<float> m({L, K, C, S, S, 16, 3}, L * 100 + K * 10 + C + S);
            const auto x = random_tensor<float>({2, C, S, S}, 8);
            m.forward(x);
            m.perturb(9, 0.05);
            m.workers = 2;
            CHECK(max_abs_diff(m.inverse(m.forward(x).latents), x) <= 1e-3);
          }
  }

  TEST_CASE("f64 inverse within 1e-8") {
    FlowModel<double> m({2, 4, 4, 16, 16, 16, 3}, 10);
    const auto x = random_tensor<double>({1, 4, 16, 16}, 11);
    m.forward(x);
    m.perturb(12, 0.05);
    CHECK(max_abs_diff(m.inverse(m.forward(x).latents), x) <= 1e-8);
  }

  TEST_CASE("sampling: dims, seeds and zero temperature") {
    FlowModel<float> m({2, 1, 4, 8, 8, 8, 3}, 13);
    m.forward(random_tensor<float>({4, 4, 8, 8}, 14));
    m.perturb(15, 0.05);
    const auto a = m.sample(3, 1.0, 16);
    CHECK(a.shape() == Shape{3, 4, 8, 8});
    CHECK(m.sample(3, 1.0, 16) == a);
    CHECK_FALSE(m.sample(3, 1.0, 17) == a);
    CHECK(m.sample(2, 0.0, 1) == m.sample(2, 0.0, 2));
  }

  TEST_CASE("parameter gradients match central differences") {
    const ModelConfig cfg{2, 1, 4, 4, 4, 8, 3};
    const auto x = random_tensor<double>({2, 4, 4, 4}, 18);
    auto m = make_toy_model(cfg, x, 19);
    const auto r = gradient_check(m, x);
    CAPTURE(r.worst_param);
    CHECK(r.max_rel_error <= 1e-3);
    CHECK(r.min_preactivation >= 1e-3);
    std::size_t total = 0;
    for (const auto& p : m.params()) total += p.value->size();
    CHECK(r.checked == total);
  }

  TEST_CASE("masks survive perturbation and masked gradients are zero at anchors") {
    FlowModel<double> m({1, 2, 4, 8, 8, 8, 3}, 20);
    m.perturb(21, 0.5);
    CHECK(m.masks_intact());
    const auto x = random_tensor<double>({2, 4, 8, 8}, 22);
    m.zero_grad();
    m.forward(x);
    m.backward();
    m.mask_gradients();
    for (const auto& p : m.params()) {
      if (p.name.find(".unit.block") == std::string::npos) continue;
      const auto block = static_cast<std::size_t>(p.name.back() - '0');
      const auto [ap, aq] = anchor_tap(kUnitOrientations[block], 3);
      for (std::size_t co = 0; co < p.grad->n(); ++co)
        for (std::size_t ci = 0; ci < p.grad->c(); ++ci) CHECK((*p.grad)(co, ci, ap, aq) == 0.0);
    }
  }

  TEST_CASE("parameter names are unique and stable") {
    FlowModel<float> m({2, 1, 4, 8, 8, 8, 3}, 23);
    std::set<std::string> names;
    for (const auto& p : m.params()) names.insert(p.name);
    CHECK(names.size() == m.params().size());
    CHECK(names.count("level0.step0.unit.block0"));
    CHECK(names.count("level0.split.weight"));
    CHECK(names.count("top.logs"));
  }
}
