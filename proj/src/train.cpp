#include "fincflow/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>

#include "fincflow/image_io.hpp"
#include "fincflow/tensor_io.hpp"

namespace fincflow {

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw InvalidConfig("lr must be finite and >= 0");
  if (!(decay > 0.0 && decay <= 1.0)) throw InvalidConfig("decay must be in (0, 1]");
  if (grad_clip && !(*grad_clip > 0.0)) throw InvalidConfig("grad_clip must be > 0");
  if (batch == 0) throw InvalidConfig("batch must be >= 1");
  if (epochs == 0) throw InvalidConfig("epochs must be >= 1");
}

Dataset synthetic_blobs(std::size_t count, std::uint64_t seed) {
  constexpr std::size_t C = 4, H = 8, W = 8;
  struct Component {
    double cy, cx;
    std::array<double, C> amplitude;
  };
  const std::array<Component, 2> mixture{{
      {2.0, 2.5, {1.0, 0.6, 0.3, 0.8}},
      {5.0, 5.0, {0.3, 0.9, 0.7, 0.2}},
  }};
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution pick(0.5);
  std::normal_distribution<double> jitter(0.0, 0.4);
  std::normal_distribution<double> noise(0.0, 3.0);
  Dataset d{C, H, W, std::vector<std::uint8_t>(count * C * H * W)};
  for (std::size_t i = 0; i < count; ++i) {
    const Component& comp = mixture[pick(rng) ? 1 : 0];
    const double cy = comp.cy + jitter(rng);
    const double cx = comp.cx + jitter(rng);
    const double sigma = 1.6;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const double r2 = (h - cy) * (h - cy) + (w - cx) * (w - cx);
          const double v = 25.0 + 200.0 * comp.amplitude[c] * std::exp(-r2 / (2 * sigma * sigma)) + noise(rng);
          d.pixels[((i * C + c) * H + h) * W + w] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
  }
  return d;
}

namespace {

Dataset load_pnm_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw BadFormat(dir.string() + ": no .pgm/.ppm images");
  Dataset d;
  for (const auto& f : files) {
    const Image img = read_pnm(f);
    if (d.pixels.empty()) {
      d.channels = img.channels;
      d.height = img.height;
      d.width = img.width;
    } else if (img.channels != d.channels || img.height != d.height || img.width != d.width) {
      throw DimsMismatch(f.string() + " differs from the first image's dims");
    }
    d.pixels.insert(d.pixels.end(), img.pixels.begin(), img.pixels.end());
  }
  return d;
}

Dataset load_ften_archive(const std::filesystem::path& path) {
  const Tensor<double> t = read_tensor_as<double>(path);
  Dataset d{t.c(), t.h(), t.w(), std::vector<std::uint8_t>(t.size())};
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double v = t[i];
    if (!(v >= 0.0 && v <= 255.0) || v != std::floor(v))
      throw BadFormat(path.string() + ": archive values must be integers in [0, 255]");
    d.pixels[i] = static_cast<std::uint8_t>(v);
  }
  return d;
}

}  // namespace

Dataset dataset_load(const std::string& source) {
  if (source == "synthetic") return synthetic_blobs(512, 0);
  const std::filesystem::path p(source);
  if (std::filesystem::is_directory(p)) return load_pnm_dir(p);
  if (p.extension() == ".ften") return load_ften_archive(p);
  if (p.extension() == ".pgm" || p.extension() == ".ppm") {
    const Image img = read_pnm(p);
    return Dataset{img.channels, img.height, img.width, img.pixels};
  }
  throw BadFormat("unrecognized dataset source '" + source + "'");
}

template <typename T>
Tensor<T> dequantize(const Dataset& data, std::span<const std::size_t> indices, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<T> x({indices.size(), data.channels, data.height, data.width});
  std::size_t o = 0;
  for (std::size_t idx : indices)
    for (std::uint8_t px : data.image(idx)) {
      // float rounding could lift 255.99.../256 to 1.0; keep the range half-open
      T v = static_cast<T>((px + u(rng)) / 256.0);
      if (v >= T(1)) v = std::nextafter(T(1), T(0));
      x[o++] = v;
    }
  return x;
}

template <typename T>
Tensor<T> dequantize_midpoint(const Dataset& data, std::span<const std::size_t> indices) {
  Tensor<T> x({indices.size(), data.channels, data.height, data.width});
  std::size_t o = 0;
  for (std::size_t idx : indices)
    for (std::uint8_t px : data.image(idx)) x[o++] = static_cast<T>((px + 0.5) / 256.0);
  return x;
}

double dequantization_offset(std::size_t dims) { return static_cast<double>(dims) * std::log(256.0); }

template <typename T>
double nll_continuous(const ModelForward<T>& f) {
  if (f.logp.empty() || f.logp.size() != f.logdet.size()) throw ShapeMismatch("forward result has no samples");
  double s = 0.0;
  for (std::size_t n = 0; n < f.logp.size(); ++n) s -= f.logp[n] + f.logdet[n];
  const double v = s / static_cast<double>(f.logp.size());
  if (!std::isfinite(v)) throw NonFiniteLoss("NLL = " + std::to_string(v));
  return v;
}

template <typename T>
double nll(const ModelForward<T>& f, std::size_t dims) {
  return nll_continuous(f) + dequantization_offset(dims);
}

double bpd(double nll_nats, std::size_t dims) { return nll_nats * std::numbers::log2e / static_cast<double>(dims); }

template <typename T>
Adam<T>::Adam(const std::vector<Param<T>>& params, double lr) : lr_(lr) {
  for (const auto& p : params) {
    m_.emplace_back(p.value->shape());
    v_.emplace_back(p.value->shape());
  }
}

template <typename T>
void Adam<T>::step(const std::vector<Param<T>>& params) {
  if (params.size() != m_.size()) throw ShapeMismatch("Adam parameter list changed");
  ++t_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& value = *params[i].value;
    const Tensor<T>& grad = *params[i].grad;
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad[j];
      const double m = kBeta1 * m_[i][j] + (1.0 - kBeta1) * g;
      const double v = kBeta2 * v_[i][j] + (1.0 - kBeta2) * g * g;
      m_[i][j] = static_cast<T>(m);
      v_[i][j] = static_cast<T>(v);
      value[j] = static_cast<T>(value[j] - lr_ * (m / c1) / (std::sqrt(v / c2) + kEps));
    }
  }
}

template <typename T>
StepMetrics train_step(FlowModel<T>& model, const Tensor<T>& batch, const TrainConfig& config, Adam<T>& adam) {
  const std::size_t dims = model.config().dims();
  model.zero_grad();
  const ModelForward<T> f = model.forward(batch);
  StepMetrics m;
  m.nll = nll(f, dims);
  m.bpd = bpd(m.nll, dims);
  model.backward();
  model.mask_gradients();

  auto params = model.params();
  double sq = 0.0;
  for (const auto& p : params)
    for (T g : p.grad->data()) sq += static_cast<double>(g) * g;
  m.grad_norm = std::sqrt(sq);
  if (!std::isfinite(m.grad_norm)) throw NonFiniteLoss("gradient norm is not finite");
  if (config.grad_clip) {
    const T c = static_cast<T>(*config.grad_clip);
    for (auto& p : params)
      for (auto& g : p.grad->data()) g = std::clamp(g, -c, c);
  }
  adam.step(params);
  model.apply_masks();
  return m;
}

template <typename T>
TrainSummary train(FlowModel<T>& model, const Dataset& data, const TrainConfig& config, std::ostream* csv) {
  config.validate();
  const ModelConfig& mc = model.config();
  if (data.channels != mc.channels || data.height != mc.height || data.width != mc.width)
    throw DimsMismatch("dataset images are " + std::to_string(data.channels) + "x" + std::to_string(data.height) +
                       "x" + std::to_string(data.width) + ", model expects " + std::to_string(mc.channels) + "x" +
                       std::to_string(mc.height) + "x" + std::to_string(mc.width));
  if (data.size() == 0) throw BadFormat("empty dataset");

  std::mt19937_64 rng(config.seed);
  Adam<T> adam(model.params(), config.lr);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  TrainSummary summary;
  if (csv) *csv << "epoch,step,nll,bpd,grad_norm,lr\n";

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      if (config.max_steps && summary.steps >= config.max_steps) return summary;
      const std::size_t end = std::min(order.size(), start + config.batch);
      const auto idx = std::span<const std::size_t>(order).subspan(start, end - start);
      const Tensor<T> x = dequantize<T>(data, idx, rng);
      const double lr_used = adam.lr();
      const StepMetrics m = train_step(model, x, config, adam);
      if (summary.steps == 0) summary.first_bpd = m.bpd;
      summary.last_bpd = m.bpd;
      summary.history.push_back(m);
      ++summary.steps;
      if (csv) {
        char line[256];
        std::snprintf(line, sizeof(line), "%zu,%zu,%.10g,%.10g,%.10g,%.10g\n", epoch, summary.steps, m.nll, m.bpd,
                      m.grad_norm, lr_used);
        *csv << line;
      }
      if (config.decay_per_step) adam.decay(config.decay);
    }
    if (!config.decay_per_step) adam.decay(config.decay);
  }
  return summary;
}

template <typename T>
double evaluate_bpd(FlowModel<T>& model, const Dataset& data, std::size_t batch) {
  const std::size_t dims = model.config().dims();
  double total = 0.0;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t end = std::min(data.size(), start + batch);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const ModelForward<T> f = model.forward(dequantize_midpoint<T>(data, idx));
    total += nll(f, dims) * static_cast<double>(idx.size());
  }
  return bpd(total / static_cast<double>(data.size()), dims);
}

#define FINCFLOW_INSTANTIATE(T)                                                                         \
  template Tensor<T> dequantize(const Dataset&, std::span<const std::size_t>, std::mt19937_64&);        \
  template Tensor<T> dequantize_midpoint(const Dataset&, std::span<const std::size_t>);                 \
  template double nll_continuous(const ModelForward<T>&);                                               \
  template double nll(const ModelForward<T>&, std::size_t);                                             \
  template class Adam<T>;                                                                               \
  template StepMetrics train_step(FlowModel<T>&, const Tensor<T>&, const TrainConfig&, Adam<T>&);       \
  template TrainSummary train(FlowModel<T>&, const Dataset&, const TrainConfig&, std::ostream*);        \
  template double evaluate_bpd(FlowModel<T>&, const Dataset&, std::size_t);

FINCFLOW_INSTANTIATE(float)
FINCFLOW_INSTANTIATE(double)

#undef FINCFLOW_INSTANTIATE

}  // namespace fincflow
