#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "fincflow/flow.hpp"

namespace fincflow {

struct TrainConfig {
  double lr = 1e-3;
  double decay = 0.99997;         // lr multiplier, applied per epoch by default
  bool decay_per_step = false;
  std::optional<double> grad_clip;  // elementwise clamp to [-clip, clip]
  std::size_t batch = 64;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0 = no cap
  std::uint64_t seed = 0;

  void validate() const;
};

// u8 images with uniform dims, stored back to back as (C, H, W).
struct Dataset {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  std::size_t image_size() const { return channels * height * width; }
  std::size_t size() const { return image_size() == 0 ? 0 : pixels.size() / image_size(); }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(pixels).subspan(i * image_size(), image_size());
  }
};

// Canonical training fixture: 8x8x4 images, each one smoothed Gaussian blob
// drawn from a two-component mixture (position and per-channel intensity).
Dataset synthetic_blobs(std::size_t count, std::uint64_t seed);

// "synthetic" -> synthetic_blobs(512, 0); a directory -> every .pgm/.ppm in
// name order; a .ften file -> (N, C, H, W) archive of integers in [0, 255].
Dataset dataset_load(const std::string& source);

// (x + u) / 256 with u ~ U[0, 1), for the listed images.
template <typename T>
Tensor<T> dequantize(const Dataset& data, std::span<const std::size_t> indices, std::mt19937_64& rng);

// Midpoint dequantization (u = 1/2); deterministic.
template <typename T>
Tensor<T> dequantize_midpoint(const Dataset& data, std::span<const std::size_t> indices);

// Change of scale from [0,256) integers to [0,1): D * log 256 nats per sample.
double dequantization_offset(std::size_t dims);

// Mean over the batch of -(logp_n + logdet_n), in nats, without the
// dequantization term. Throws NonFiniteLoss.
template <typename T>
double nll_continuous(const ModelForward<T>& f);

// nll_continuous + dequantization_offset(dims).
template <typename T>
double nll(const ModelForward<T>& f, std::size_t dims);

double bpd(double nll_nats, std::size_t dims);

// Adam, beta = (0.9, 0.999), eps = 1e-8, over a fixed parameter list.
template <typename T>
class Adam {
 public:
  Adam(const std::vector<Param<T>>& params, double lr);

  void step(const std::vector<Param<T>>& params);
  void decay(double factor) { lr_ *= factor; }
  double lr() const { return lr_; }
  std::size_t steps() const { return t_; }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

 private:
  double lr_;
  std::size_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

struct StepMetrics {
  double nll = 0.0;
  double bpd = 0.0;
  double grad_norm = 0.0;  // global L2, before clipping
};

// forward, NLL, backward, mask anchor gradients, optional clip, Adam, re-mask.
template <typename T>
StepMetrics train_step(FlowModel<T>& model, const Tensor<T>& batch, const TrainConfig& config, Adam<T>& adam);

struct TrainSummary {
  std::size_t steps = 0;
  double first_bpd = 0.0;
  double last_bpd = 0.0;
  std::vector<StepMetrics> history;
};

// Runs epochs of shuffled minibatches. When csv is non-null writes
// "epoch,step,nll,bpd,grad_norm,lr" lines (header first).
template <typename T>
TrainSummary train(FlowModel<T>& model, const Dataset& data, const TrainConfig& config, std::ostream* csv = nullptr);

// Mean BPD over the whole dataset, midpoint dequantization, no parameter change.
template <typename T>
double evaluate_bpd(FlowModel<T>& model, const Dataset& data, std::size_t batch);

}  // namespace fincflow
