#include "fincflow/flow.hpp"

#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "fincflow/nn.hpp"

namespace fincflow {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

void require_batch(const LogVec& v, std::size_t n, const char* what) {
  if (v.size() != n)
    throw ShapeMismatch(std::string(what) + " accumulator has " + std::to_string(v.size()) + " entries for batch " +
                        std::to_string(n));
}

template <typename T>
Eigen::MatrixXd to_matrix(const Tensor<T>& w) {
  const std::size_t C = w.n();
  Eigen::MatrixXd m(C, C);
  for (std::size_t r = 0; r < C; ++r)
    for (std::size_t c = 0; c < C; ++c) m(r, c) = static_cast<double>(w(r, c, 0, 0));
  return m;
}

template <typename T>
Tensor<T> from_matrix(const Eigen::MatrixXd& m) {
  const auto C = static_cast<std::size_t>(m.rows());
  Tensor<T> w({C, C, 1, 1});
  for (std::size_t r = 0; r < C; ++r)
    for (std::size_t c = 0; c < C; ++c) w(r, c, 0, 0) = static_cast<T>(m(r, c));
  return w;
}

template <typename T>
void fill_normal(Tensor<T>& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, stddev);
  for (auto& v : t.data()) v = static_cast<T>(g(rng));
}

// log(sigmoid(r)), stable for large |r|
inline double log_sigmoid(double r) { return r >= 0 ? -std::log1p(std::exp(-r)) : r - std::log1p(std::exp(r)); }

void require_even(std::size_t channels, const char* who) {
  if (channels % 2 != 0) throw OddChannels(std::string(who) + " needs even channels, got " + std::to_string(channels));
}

template <typename T>
T broadcast_at(const Tensor<T>& p, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  return p.n() == 1 ? p(0, c, h, w) : p(n, c, h, w);
}

}  // namespace

// ---------------------------------------------------------------- ActNorm

template <typename T>
ActNorm<T>::ActNorm(std::size_t channels)
    : scale({channels, 1, 1, 1}, T(1)),
      bias({channels, 1, 1, 1}),
      grad_scale({channels, 1, 1, 1}),
      grad_bias({channels, 1, 1, 1}) {}

template <typename T>
void ActNorm<T>::initialize_from(const Tensor<T>& x) {
  const Shape s = x.shape();
  const double count = static_cast<double>(s.n * s.plane());
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = &x(n, c, 0, 0);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        sum += p[i];
        sq += static_cast<double>(p[i]) * p[i];
      }
    }
    const double mean = sum / count;
    const double var = std::max(0.0, sq / count - mean * mean);
    const double inv = 1.0 / (std::sqrt(var) + 1e-6);
    scale[c] = static_cast<T>(inv);
    bias[c] = static_cast<T>(-mean * inv);
  }
  initialized = true;
}

template <typename T>
void ActNorm<T>::check_scale() const {
  for (std::size_t c = 0; c < scale.size(); ++c)
    if (scale[c] == T(0)) throw ZeroScale("actnorm channel " + std::to_string(c));
}

template <typename T>
double ActNorm<T>::logdet_per_sample(std::size_t height, std::size_t width) const {
  double s = 0.0;
  for (std::size_t c = 0; c < scale.size(); ++c) s += std::log(std::abs(static_cast<double>(scale[c])));
  return static_cast<double>(height * width) * s;
}

template <typename T>
Tensor<T> ActNorm<T>::forward(const Tensor<T>& x, LogVec& logdet) {
  if (x.c() != scale.size()) throw ShapeMismatch("actnorm channels");
  require_batch(logdet, x.n(), "logdet");
  if (!initialized) initialize_from(x);
  check_scale();
  cache_ = x;
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c) {
      const T* in = &x(n, c, 0, 0);
      T* out = &y(n, c, 0, 0);
      for (std::size_t i = 0; i < x.shape().plane(); ++i) out[i] = scale[c] * in[i] + bias[c];
    }
  const double ld = logdet_per_sample(x.h(), x.w());
  for (auto& v : logdet) v += ld;
  return y;
}

template <typename T>
Tensor<T> ActNorm<T>::inverse(const Tensor<T>& y) const {
  if (y.c() != scale.size()) throw ShapeMismatch("actnorm channels");
  check_scale();
  Tensor<T> x(y.shape());
  for (std::size_t n = 0; n < y.n(); ++n)
    for (std::size_t c = 0; c < y.c(); ++c) {
      const T* in = &y(n, c, 0, 0);
      T* out = &x(n, c, 0, 0);
      for (std::size_t i = 0; i < y.shape().plane(); ++i) out[i] = (in[i] - bias[c]) / scale[c];
    }
  return x;
}

template <typename T>
Tensor<T> ActNorm<T>::backward(const Tensor<T>& grad_y, double logdet_weight) {
  if (cache_.empty()) throw MissingCache("actnorm backward before forward");
  if (grad_y.shape() != cache_.shape()) throw ShapeMismatch("actnorm gradient shape");
  const Shape s = cache_.shape();
  Tensor<T> gx(s);
  for (std::size_t c = 0; c < s.c; ++c) {
    double gs = 0.0, gb = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* g = &grad_y(n, c, 0, 0);
      const T* x = &cache_(n, c, 0, 0);
      T* out = &gx(n, c, 0, 0);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        out[i] = g[i] * scale[c];
        gs += static_cast<double>(g[i]) * x[i];
        gb += g[i];
      }
    }
    gs += logdet_weight * static_cast<double>(s.n * s.plane()) / static_cast<double>(scale[c]);
    grad_scale[c] += static_cast<T>(gs);
    grad_bias[c] += static_cast<T>(gb);
  }
  return gx;
}

template <typename T>
void ActNorm<T>::collect(std::vector<Param<T>>& out, const std::string& prefix) {
  out.push_back({prefix + ".scale", &scale, &grad_scale});
  out.push_back({prefix + ".bias", &bias, &grad_bias});
}

// ---------------------------------------------------------------- Inv1x1

template <typename T>
Inv1x1<T>::Inv1x1(std::size_t channels, std::mt19937_64& rng) : grad_weight({channels, channels, 1, 1}) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd a(channels, channels);
  for (Eigen::Index r = 0; r < a.rows(); ++r)
    for (Eigen::Index c = 0; c < a.cols(); ++c) a(r, c) = g(rng);
  Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
  weight = from_matrix<T>(q);
}

template <typename T>
double Inv1x1<T>::log_abs_det() const {
  const double det = Eigen::PartialPivLU<Eigen::MatrixXd>(to_matrix(weight)).determinant();
  if (!(std::abs(det) >= 1e-12)) throw SingularWeight("|det W| = " + std::to_string(std::abs(det)));
  return std::log(std::abs(det));
}

template <typename T>
Tensor<T> Inv1x1<T>::forward(const Tensor<T>& x, LogVec& logdet) {
  if (x.c() != weight.n()) throw ShapeMismatch("1x1 conv channels");
  require_batch(logdet, x.n(), "logdet");
  const double ld = static_cast<double>(x.shape().plane()) * log_abs_det();
  cache_ = x;
  for (auto& v : logdet) v += ld;
  return nn::correlate(x, weight, 0, 0);
}

template <typename T>
Tensor<T> Inv1x1<T>::inverse(const Tensor<T>& y) const {
  if (y.c() != weight.n()) throw ShapeMismatch("1x1 conv channels");
  log_abs_det();  // singularity check
  const Tensor<T> inv = from_matrix<T>(to_matrix(weight).inverse());
  return nn::correlate(y, inv, 0, 0);
}

template <typename T>
Tensor<T> Inv1x1<T>::backward(const Tensor<T>& grad_y, double logdet_weight) {
  if (cache_.empty()) throw MissingCache("1x1 conv backward before forward");
  Tensor<T> gx = nn::correlate_backward(cache_, weight, grad_y, 0, 0, &grad_weight);
  // d log|det W| / dW = W^{-T}
  const Eigen::MatrixXd inv_t = to_matrix(weight).inverse().transpose();
  const double factor = logdet_weight * static_cast<double>(cache_.n() * cache_.shape().plane());
  for (std::size_t r = 0; r < weight.n(); ++r)
    for (std::size_t c = 0; c < weight.n(); ++c)
      grad_weight(r, c, 0, 0) += static_cast<T>(factor * inv_t(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
  return gx;
}

template <typename T>
void Inv1x1<T>::collect(std::vector<Param<T>>& out, const std::string& prefix) {
  out.push_back({prefix + ".weight", &weight, &grad_weight});
}

// ---------------------------------------------------------------- Coupling

template <typename T>
Coupling<T>::Coupling(std::size_t channels, std::size_t hidden, std::mt19937_64& rng) {
  require_even(channels, "coupling");
  const std::size_t half = channels / 2;
  w1 = Tensor<T>({hidden, half, 3, 3});
  b1 = Tensor<T>({hidden, 1, 1, 1});
  w2 = Tensor<T>({hidden, hidden, 1, 1});
  b2 = Tensor<T>({hidden, 1, 1, 1});
  w3 = Tensor<T>({channels, hidden, 3, 3});
  b3 = Tensor<T>({channels, 1, 1, 1});
  fill_normal(w1, 0.05, rng);
  fill_normal(w2, 0.05, rng);
  gw1 = Tensor<T>(w1.shape());
  gb1 = Tensor<T>(b1.shape());
  gw2 = Tensor<T>(w2.shape());
  gb2 = Tensor<T>(b2.shape());
  gw3 = Tensor<T>(w3.shape());
  gb3 = Tensor<T>(b3.shape());
}

template <typename T>
typename Coupling<T>::NetOut Coupling<T>::run_net(const Tensor<T>& x1) const {
  NetOut o;
  o.h1 = nn::conv_same(x1, w1, b1);
  o.a1 = nn::relu(o.h1);
  o.h2 = nn::conv_same(o.a1, w2, b2);
  o.a2 = nn::relu(o.h2);
  const Tensor<T> h3 = nn::conv_same(o.a2, w3, b3);
  const std::size_t half = h3.c() / 2;
  o.shift = channel_slice(h3, 0, half);
  o.raw = channel_slice(h3, half, half);
  return o;
}

template <typename T>
Tensor<T> Coupling<T>::forward(const Tensor<T>& x, LogVec& logdet) {
  require_even(x.c(), "coupling");
  if (x.c() != w3.n()) throw ShapeMismatch("coupling channels");
  require_batch(logdet, x.n(), "logdet");
  const std::size_t half = x.c() / 2;
  Cache cache{channel_slice(x, 0, half), channel_slice(x, half, half), {}};
  cache.net = run_net(cache.x1);

  Tensor<T> y2(cache.x2.shape());
  const std::size_t per_sample = half * x.shape().plane();
  for (std::size_t n = 0; n < x.n(); ++n) {
    double ld = 0.0;
    for (std::size_t i = n * per_sample; i < (n + 1) * per_sample; ++i) {
      const double r = cache.net.raw[i];
      const T s = static_cast<T>(2.0 * nn::sigmoid(r));
      y2[i] = cache.x2[i] * s + cache.net.shift[i];
      ld += std::numbers::ln2 + log_sigmoid(r);
    }
    logdet[n] += ld;
  }
  Tensor<T> y = channel_concat({cache.x1, y2});
  cache_ = std::move(cache);
  return y;
}

template <typename T>
Tensor<T> Coupling<T>::inverse(const Tensor<T>& y) const {
  require_even(y.c(), "coupling");
  if (y.c() != w3.n()) throw ShapeMismatch("coupling channels");
  const std::size_t half = y.c() / 2;
  Tensor<T> y1 = channel_slice(y, 0, half);
  Tensor<T> x2 = channel_slice(y, half, half);
  const NetOut net = run_net(y1);
  for (std::size_t i = 0; i < x2.size(); ++i) {
    const T s = static_cast<T>(2.0 * nn::sigmoid(static_cast<double>(net.raw[i])));
    x2[i] = (x2[i] - net.shift[i]) / s;
  }
  return channel_concat({y1, x2});
}

template <typename T>
Tensor<T> Coupling<T>::backward(const Tensor<T>& grad_y, double logdet_weight) {
  if (!cache_) throw MissingCache("coupling backward before forward");
  const Cache& c = *cache_;
  const std::size_t half = c.x1.c();
  const Tensor<T> gy1 = channel_slice(grad_y, 0, half);
  const Tensor<T> gy2 = channel_slice(grad_y, half, half);

  Tensor<T> gx2(c.x2.shape());
  Tensor<T> graw(c.x2.shape());
  for (std::size_t i = 0; i < gx2.size(); ++i) {
    const double sig = nn::sigmoid(static_cast<double>(c.net.raw[i]));
    const double s = 2.0 * sig;
    gx2[i] = static_cast<T>(gy2[i] * s);
    // ds/draw = s (1 - sig); dlog s/draw = 1 - sig
    graw[i] = static_cast<T>(static_cast<double>(gy2[i]) * c.x2[i] * s * (1.0 - sig) + logdet_weight * (1.0 - sig));
  }
  const Tensor<T> gh3 = channel_concat({gy2, graw});
  const Tensor<T> ga2 = nn::conv_same_backward(c.net.a2, w3, gh3, gw3, gb3);
  const Tensor<T> ga1 = nn::conv_same_backward(c.net.a1, w2, nn::relu_backward(c.net.h2, ga2), gw2, gb2);
  Tensor<T> gx1 = nn::conv_same_backward(c.x1, w1, nn::relu_backward(c.net.h1, ga1), gw1, gb1);
  for (std::size_t i = 0; i < gx1.size(); ++i) gx1[i] += gy1[i];
  return channel_concat({gx1, gx2});
}

template <typename T>
double Coupling<T>::min_abs_preactivation() const {
  if (!cache_) throw MissingCache("no coupling forward recorded");
  double m = INFINITY;
  for (const auto* t : {&cache_->net.h1, &cache_->net.h2})
    for (T v : t->data()) m = std::min(m, std::abs(static_cast<double>(v)));
  return m;
}

template <typename T>
void Coupling<T>::collect(std::vector<Param<T>>& out, const std::string& prefix) {
  out.push_back({prefix + ".w1", &w1, &gw1});
  out.push_back({prefix + ".b1", &b1, &gb1});
  out.push_back({prefix + ".w2", &w2, &gw2});
  out.push_back({prefix + ".b2", &b2, &gb2});
  out.push_back({prefix + ".w3", &w3, &gw3});
  out.push_back({prefix + ".b3", &b3, &gb3});
}

// ---------------------------------------------------------------- Split

template <typename T>
Split<T>::Split(std::size_t channels) {
  require_even(channels, "split");
  weight = Tensor<T>({channels, channels / 2, 3, 3});
  bias = Tensor<T>({channels, 1, 1, 1});
  grad_weight = Tensor<T>(weight.shape());
  grad_bias = Tensor<T>(bias.shape());
}

template <typename T>
LogVec gaussian_logp(const Tensor<T>& z, const Tensor<T>& mean, const Tensor<T>& logs) {
  const Shape s = z.shape();
  for (const auto* p : {&mean, &logs})
    if (p->c() != s.c || p->h() != s.h || p->w() != s.w || (p->n() != 1 && p->n() != s.n))
      throw ShapeMismatch("gaussian parameters " + p->shape().str() + " for latent " + s.str());
  LogVec out(s.n, 0.0);
  for (std::size_t n = 0; n < s.n; ++n) {
    double acc = 0.0;
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) {
          const double ls = broadcast_at(logs, n, c, h, w);
          const double u = (static_cast<double>(z(n, c, h, w)) - broadcast_at(mean, n, c, h, w)) * std::exp(-ls);
          acc += -kHalfLog2Pi - ls - 0.5 * u * u;
        }
    out[n] = acc;
  }
  return out;
}

template <typename T>
typename Split<T>::Out Split<T>::forward(const Tensor<T>& x, LogVec& logp) {
  require_even(x.c(), "split");
  if (x.c() != weight.n()) throw ShapeMismatch("split channels");
  require_batch(logp, x.n(), "logp");
  const std::size_t half = x.c() / 2;
  Cache c{channel_slice(x, 0, half), channel_slice(x, half, half), {}};
  c.prior = nn::conv_same(c.retained, weight, bias);
  const LogVec lp = gaussian_logp(c.z, channel_slice(c.prior, 0, half), channel_slice(c.prior, half, half));
  for (std::size_t n = 0; n < lp.size(); ++n) logp[n] += lp[n];
  Out out{c.retained, c.z};
  cache_ = std::move(c);
  return out;
}

template <typename T>
Tensor<T> Split<T>::inverse(const Tensor<T>& retained, const Tensor<T>& z) const {
  if (retained.c() * 2 != weight.n() || z.shape() != retained.shape())
    throw ShapeMismatch("split inverse: retained " + retained.shape().str() + ", z " + z.shape().str());
  return channel_concat({retained, z});
}

template <typename T>
Tensor<T> Split<T>::sample(const Tensor<T>& retained, double temperature, std::mt19937_64& rng) const {
  if (retained.c() * 2 != weight.n()) throw ShapeMismatch("split sample: retained " + retained.shape().str());
  const Tensor<T> prior = nn::conv_same(retained, weight, bias);
  const std::size_t half = retained.c();
  const Tensor<T> mean = channel_slice(prior, 0, half);
  const Tensor<T> logs = channel_slice(prior, half, half);
  std::normal_distribution<double> g(0.0, 1.0);
  Tensor<T> z(retained.shape());
  for (std::size_t i = 0; i < z.size(); ++i)
    z[i] = static_cast<T>(mean[i] + temperature * std::exp(static_cast<double>(logs[i])) * g(rng));
  return channel_concat({retained, z});
}

template <typename T>
Tensor<T> Split<T>::backward(const Tensor<T>& grad_retained, double logp_weight) {
  if (!cache_) throw MissingCache("split backward before forward");
  const Cache& c = *cache_;
  const std::size_t half = c.z.c();
  Tensor<T> gz(c.z.shape());
  Tensor<T> gprior(c.prior.shape());
  for (std::size_t n = 0; n < c.z.n(); ++n)
    for (std::size_t ch = 0; ch < half; ++ch)
      for (std::size_t h = 0; h < c.z.h(); ++h)
        for (std::size_t w = 0; w < c.z.w(); ++w) {
          const double mean = c.prior(n, ch, h, w);
          const double ls = c.prior(n, half + ch, h, w);
          const double inv = std::exp(-ls);
          const double u = (static_cast<double>(c.z(n, ch, h, w)) - mean) * inv;
          gz(n, ch, h, w) = static_cast<T>(logp_weight * -u * inv);
          gprior(n, ch, h, w) = static_cast<T>(logp_weight * u * inv);
          gprior(n, half + ch, h, w) = static_cast<T>(logp_weight * (u * u - 1.0));
        }
  Tensor<T> gret = nn::conv_same_backward(c.retained, weight, gprior, grad_weight, grad_bias);
  if (grad_retained.shape() != gret.shape()) throw ShapeMismatch("split gradient shape");
  for (std::size_t i = 0; i < gret.size(); ++i) gret[i] += grad_retained[i];
  return channel_concat({gret, gz});
}

template <typename T>
void Split<T>::collect(std::vector<Param<T>>& out, const std::string& prefix) {
  out.push_back({prefix + ".weight", &weight, &grad_weight});
  out.push_back({prefix + ".bias", &bias, &grad_bias});
}

// ---------------------------------------------------------------- squeeze

template <typename T>
Tensor<T> squeeze(const Tensor<T>& x) {
  const Shape s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) throw OddSpatialDims("squeeze of " + s.str());
  Tensor<T> y({s.n, s.c * 4, s.h / 2, s.w / 2});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < s.h / 2; ++i)
        for (std::size_t j = 0; j < s.w / 2; ++j)
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) y(n, c * 4 + dy * 2 + dx, i, j) = x(n, c, 2 * i + dy, 2 * j + dx);
  return y;
}

template <typename T>
Tensor<T> unsqueeze(const Tensor<T>& y) {
  const Shape s = y.shape();
  if (s.c % 4 != 0) throw IndivisibleChannels("unsqueeze of " + s.str());
  Tensor<T> x({s.n, s.c / 4, s.h * 2, s.w * 2});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c / 4; ++c)
      for (std::size_t i = 0; i < s.h; ++i)
        for (std::size_t j = 0; j < s.w; ++j)
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) x(n, c, 2 * i + dy, 2 * j + dx) = y(n, c * 4 + dy * 2 + dx, i, j);
  return x;
}

// ---------------------------------------------------------------- model

void ModelConfig::validate() const {
  if (levels == 0 || steps == 0 || channels == 0 || hidden == 0 || kernel == 0)
    throw InvalidConfig("levels, steps, channels, hidden and kernel must all be >= 1");
  if (levels >= 16) throw InvalidConfig("too many levels");
  const std::size_t f = std::size_t{1} << levels;
  if (height % f != 0 || width % f != 0)
    throw InvalidConfig("image " + std::to_string(height) + "x" + std::to_string(width) + " not divisible by 2^L = " +
                        std::to_string(f));
}

template <typename T>
double ModelForward<T>::logdet_total() const {
  double s = 0.0;
  for (double v : logdet) s += v;
  return s;
}

template <typename T>
double ModelForward<T>::logp_total() const {
  double s = 0.0;
  for (double v : logp) s += v;
  return s;
}

template <typename T>
FlowModel<T>::FlowModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  std::size_t C = config_.channels, H = config_.height, W = config_.width;
  for (std::size_t l = 0; l < config_.levels; ++l) {
    C *= 4;
    H /= 2;
    W /= 2;
    Level level;
    for (std::size_t k = 0; k < config_.steps; ++k) {
      FlowStep<T> step;
      step.unit = FincFlowUnit<T>::random(C, config_.kernel, rng);
      for (auto& g : step.unit_grads) g = Tensor<T>({C / 4, C / 4, config_.kernel, config_.kernel});
      step.actnorm = ActNorm<T>(C);
      step.inv1x1 = Inv1x1<T>(C, rng);
      step.coupling = Coupling<T>(C, config_.hidden, rng);
      level.steps.push_back(std::move(step));
    }
    if (l + 1 < config_.levels) {
      level.split.emplace(C);
      C /= 2;
    }
    levels_.push_back(std::move(level));
  }
  top_mean_ = Tensor<T>({1, C, H, W});
  top_logs_ = Tensor<T>({1, C, H, W});
  grad_top_mean_ = Tensor<T>({1, C, H, W});
  grad_top_logs_ = Tensor<T>({1, C, H, W});
}

template <typename T>
Shape FlowModel<T>::input_shape(std::size_t batch) const {
  return {batch, config_.channels, config_.height, config_.width};
}

template <typename T>
std::vector<Shape> FlowModel<T>::latent_shapes(std::size_t batch) const {
  std::vector<Shape> out;
  std::size_t C = config_.channels, H = config_.height, W = config_.width;
  for (std::size_t l = 0; l < config_.levels; ++l) {
    C *= 4;
    H /= 2;
    W /= 2;
    if (l + 1 < config_.levels) {
      C /= 2;
      out.push_back({batch, C, H, W});
    }
  }
  out.push_back({batch, C, H, W});
  return out;
}

template <typename T>
Tensor<T> FlowModel<T>::step_forward(FlowStep<T>& s, const Tensor<T>& x, LogVec& logdet) {
  s.unit_cache = x;
  const UnitOutput<T> u = unit_forward(x, s.unit);
  for (auto& v : logdet) v += u.logdet;
  Tensor<T> h = s.actnorm.forward(u.y, logdet);
  h = s.inv1x1.forward(h, logdet);
  return s.coupling.forward(h, logdet);
}

template <typename T>
Tensor<T> FlowModel<T>::step_inverse(const FlowStep<T>& s, const Tensor<T>& y) const {
  Tensor<T> h = s.coupling.inverse(y);
  h = s.inv1x1.inverse(h);
  h = s.actnorm.inverse(h);
  return unit_invert(h, s.unit, workers);
}

template <typename T>
Tensor<T> FlowModel<T>::step_backward(FlowStep<T>& s, const Tensor<T>& grad, double weight) {
  Tensor<T> g = s.coupling.backward(grad, weight);
  g = s.inv1x1.backward(g, weight);
  g = s.actnorm.backward(g, weight);
  if (s.unit_cache.empty()) throw MissingCache("unit backward before forward");
  return unit_backward(s.unit_cache, g, s.unit, s.unit_grads);
}

template <typename T>
ModelForward<T> FlowModel<T>::forward(const Tensor<T>& x) {
  if (x.shape() != input_shape(x.n()))
    throw ShapeMismatch("model expects " + input_shape(x.n()).str() + ", got " + x.shape().str());
  const std::size_t N = x.n();
  ModelForward<T> f;
  f.logdet.assign(N, 0.0);
  f.logp.assign(N, 0.0);
  Tensor<T> h = x;
  for (auto& level : levels_) {
    h = squeeze(h);
    for (auto& step : level.steps) h = step_forward(step, h, f.logdet);
    if (level.split) {
      auto out = level.split->forward(h, f.logp);
      f.latents.push_back(std::move(out.z));
      h = std::move(out.retained);
    }
  }
  const LogVec lp = gaussian_logp(h, top_mean_, top_logs_);
  for (std::size_t n = 0; n < N; ++n) f.logp[n] += lp[n];
  top_cache_ = h;
  batch_cache_ = N;
  f.latents.push_back(std::move(h));
  return f;
}

template <typename T>
Tensor<T> FlowModel<T>::backward() {
  if (!top_cache_) throw MissingCache("model backward before forward");
  const double w = -1.0 / static_cast<double>(batch_cache_);
  const Tensor<T>& z = *top_cache_;
  Tensor<T> g(z.shape());
  for (std::size_t n = 0; n < z.n(); ++n)
    for (std::size_t c = 0; c < z.c(); ++c)
      for (std::size_t h = 0; h < z.h(); ++h)
        for (std::size_t x = 0; x < z.w(); ++x) {
          const double ls = top_logs_(0, c, h, x);
          const double inv = std::exp(-ls);
          const double u = (static_cast<double>(z(n, c, h, x)) - top_mean_(0, c, h, x)) * inv;
          g(n, c, h, x) = static_cast<T>(w * -u * inv);
          grad_top_mean_(0, c, h, x) += static_cast<T>(w * u * inv);
          grad_top_logs_(0, c, h, x) += static_cast<T>(w * (u * u - 1.0));
        }
  for (std::size_t l = levels_.size(); l-- > 0;) {
    Level& level = levels_[l];
    if (level.split) g = level.split->backward(g, w);
    for (std::size_t k = level.steps.size(); k-- > 0;) g = step_backward(level.steps[k], g, w);
    g = unsqueeze(g);
  }
  return g;
}

template <typename T>
template <typename ZSource>
Tensor<T> FlowModel<T>::run_inverse(const Tensor<T>& top, ZSource&& next_z) const {
  Tensor<T> h = top;
  for (std::size_t l = levels_.size(); l-- > 0;) {
    const Level& level = levels_[l];
    if (level.split) h = next_z(*level.split, l, h);
    for (std::size_t k = level.steps.size(); k-- > 0;) h = step_inverse(level.steps[k], h);
    h = unsqueeze(h);
  }
  return h;
}

template <typename T>
Tensor<T> FlowModel<T>::inverse(const LatentStack<T>& latents) const {
  if (latents.empty()) throw ShapeMismatch("empty latent stack");
  const auto expected = latent_shapes(latents.front().n());
  if (latents.size() != expected.size())
    throw ShapeMismatch("expected " + std::to_string(expected.size()) + " latents, got " +
                        std::to_string(latents.size()));
  for (std::size_t i = 0; i < expected.size(); ++i)
    if (latents[i].shape() != expected[i])
      throw ShapeMismatch("latent " + std::to_string(i) + " is " + latents[i].shape().str() + ", expected " +
                          expected[i].str());
  return run_inverse(latents.back(), [&](const Split<T>& split, std::size_t level, const Tensor<T>& retained) {
    return split.inverse(retained, latents[level]);
  });
}

template <typename T>
Tensor<T> FlowModel<T>::sample(std::size_t n, double temperature, std::uint64_t seed) const {
  if (n == 0) throw InvalidConfig("sample count must be >= 1");
  if (!(temperature >= 0.0)) throw InvalidConfig("temperature must be >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  const Shape ts = top_mean_.shape();
  Tensor<T> top({n, ts.c, ts.h, ts.w});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < ts.c; ++c)
      for (std::size_t h = 0; h < ts.h; ++h)
        for (std::size_t w = 0; w < ts.w; ++w)
          top(b, c, h, w) = static_cast<T>(top_mean_(0, c, h, w) +
                                           temperature * std::exp(static_cast<double>(top_logs_(0, c, h, w))) * g(rng));
  return run_inverse(top, [&](const Split<T>& split, std::size_t, const Tensor<T>& retained) {
    return split.sample(retained, temperature, rng);
  });
}

template <typename T>
std::vector<Param<T>> FlowModel<T>::params() {
  std::vector<Param<T>> out;
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    Level& level = levels_[l];
    for (std::size_t k = 0; k < level.steps.size(); ++k) {
      FlowStep<T>& s = level.steps[k];
      const std::string p = "level" + std::to_string(l) + ".step" + std::to_string(k);
      for (std::size_t b = 0; b < 4; ++b)
        out.push_back({p + ".unit.block" + std::to_string(b), &s.unit.blocks[b].weights, &s.unit_grads[b]});
      s.actnorm.collect(out, p + ".actnorm");
      s.inv1x1.collect(out, p + ".inv1x1");
      s.coupling.collect(out, p + ".coupling");
    }
    if (level.split) level.split->collect(out, "level" + std::to_string(l) + ".split");
  }
  out.push_back({"top.mean", &top_mean_, &grad_top_mean_});
  out.push_back({"top.logs", &top_logs_, &grad_top_logs_});
  return out;
}

template <typename T>
void FlowModel<T>::zero_grad() {
  for (auto& p : params()) p.grad->fill(T(0));
}

template <typename T>
void FlowModel<T>::mask_gradients() {
  for (auto& level : levels_)
    for (auto& s : level.steps)
      for (std::size_t b = 0; b < 4; ++b) zero_anchor(s.unit_grads[b], s.unit.blocks[b].orientation);
}

template <typename T>
void FlowModel<T>::apply_masks() {
  for (auto& level : levels_)
    for (auto& s : level.steps)
      for (auto& block : s.unit.blocks) block = apply_anchor_mask(std::move(block));
}

template <typename T>
bool FlowModel<T>::masks_intact() const {
  for (const auto& level : levels_)
    for (const auto& s : level.steps)
      for (const auto& block : s.unit.blocks)
        if (!anchor_is_identity(block)) return false;
  return true;
}

template <typename T>
bool FlowModel<T>::actnorm_initialized() const {
  for (const auto& level : levels_)
    for (const auto& s : level.steps)
      if (!s.actnorm.initialized) return false;
  return true;
}

template <typename T>
void FlowModel<T>::set_actnorm_initialized(bool v) {
  for (auto& level : levels_)
    for (auto& s : level.steps) s.actnorm.initialized = v;
}

template <typename T>
void FlowModel<T>::make_identity() {
  for (auto& level : levels_) {
    for (auto& s : level.steps) {
      const std::size_t C = s.unit.channels();
      s.unit = FincFlowUnit<T>::identity(C, config_.kernel);
      s.actnorm.scale.fill(T(1));
      s.actnorm.bias.fill(T(0));
      s.actnorm.initialized = true;
      s.inv1x1.weight.fill(T(0));
      for (std::size_t c = 0; c < C; ++c) s.inv1x1.weight(c, c, 0, 0) = T(1);
      s.coupling.w3.fill(T(0));
      s.coupling.b3.fill(T(0));
    }
    if (level.split) {
      level.split->weight.fill(T(0));
      level.split->bias.fill(T(0));
    }
  }
  top_mean_.fill(T(0));
  top_logs_.fill(T(0));
}

template <typename T>
void FlowModel<T>::perturb(std::uint64_t seed, double magnitude) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-magnitude, magnitude);
  for (auto& p : params())
    for (auto& v : p.value->data()) v = static_cast<T>(v + u(rng));
  apply_masks();
  set_actnorm_initialized(true);
}

template <typename T>
double FlowModel<T>::min_abs_preactivation() const {
  double m = INFINITY;
  for (const auto& level : levels_)
    for (const auto& s : level.steps) m = std::min(m, s.coupling.min_abs_preactivation());
  return m;
}

#define FINCFLOW_INSTANTIATE(T)                                                         \
  template class ActNorm<T>;                                                            \
  template class Inv1x1<T>;                                                             \
  template class Coupling<T>;                                                           \
  template class Split<T>;                                                              \
  template struct ModelForward<T>;                                                      \
  template class FlowModel<T>;                                                          \
  template Tensor<T> squeeze(const Tensor<T>&);                                         \
  template Tensor<T> unsqueeze(const Tensor<T>&);                                       \
  template LogVec gaussian_logp(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

FINCFLOW_INSTANTIATE(float)
FINCFLOW_INSTANTIATE(double)

#undef FINCFLOW_INSTANTIATE

}  // namespace fincflow
