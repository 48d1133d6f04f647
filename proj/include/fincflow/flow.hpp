#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fincflow/invconv.hpp"
#include "fincflow/tensor.hpp"

namespace fincflow {

// Per-sample log terms (log-determinants or log-densities), accumulated in
// double regardless of the model's element type.
using LogVec = std::vector<double>;

// A learnable tensor and its gradient accumulator, addressed by a stable name.
template <typename T>
struct Param {
  std::string name;
  Tensor<T>* value = nullptr;
  Tensor<T>* grad = nullptr;
};

// Layers share one shape:
//   forward(x, logdet)       -> y, adds this layer's per-sample logdet, caches x
//   inverse(y)               -> x
//   backward(grad_y, ld_w)   -> grad_x, adds parameter gradients; ld_w is
//                               dLoss/dlogdet_n (the same for every sample)
// backward without a preceding forward throws MissingCache.

template <typename T>
class ActNorm {
 public:
  ActNorm() = default;
  explicit ActNorm(std::size_t channels);

  Tensor<T> forward(const Tensor<T>& x, LogVec& logdet);
  Tensor<T> inverse(const Tensor<T>& y) const;
  Tensor<T> backward(const Tensor<T>& grad_y, double logdet_weight);
  void collect(std::vector<Param<T>>& out, const std::string& prefix);
  void clear_cache() { cache_ = {}; }

  // Per-sample logdet for an H x W input: H*W*sum_c log|scale_c|.
  double logdet_per_sample(std::size_t height, std::size_t width) const;

  Tensor<T> scale;  // (C,1,1,1)
  Tensor<T> bias;   // (C,1,1,1)
  Tensor<T> grad_scale;
  Tensor<T> grad_bias;
  bool initialized = false;

 private:
  void initialize_from(const Tensor<T>& x);
  void check_scale() const;
  Tensor<T> cache_;
};

template <typename T>
class Inv1x1 {
 public:
  Inv1x1() = default;
  // Random orthogonal initialization (QR of a Gaussian matrix).
  Inv1x1(std::size_t channels, std::mt19937_64& rng);

  Tensor<T> forward(const Tensor<T>& x, LogVec& logdet);
  Tensor<T> inverse(const Tensor<T>& y) const;
  Tensor<T> backward(const Tensor<T>& grad_y, double logdet_weight);
  void collect(std::vector<Param<T>>& out, const std::string& prefix);
  void clear_cache() { cache_ = {}; }

  // log|det W|; throws SingularWeight when |det W| < 1e-12.
  double log_abs_det() const;

  Tensor<T> weight;  // (C,C,1,1)
  Tensor<T> grad_weight;

 private:
  Tensor<T> cache_;
};

// y1 = x1, y2 = x2 * s + t with (t, raw) = net(x1), s = 2 * sigmoid(raw).
// net: 3x3 conv, ReLU, 1x1 conv, ReLU, zero-initialized 3x3 conv.
template <typename T>
class Coupling {
 public:
  Coupling() = default;
  Coupling(std::size_t channels, std::size_t hidden, std::mt19937_64& rng);

  Tensor<T> forward(const Tensor<T>& x, LogVec& logdet);
  Tensor<T> inverse(const Tensor<T>& y) const;
  Tensor<T> backward(const Tensor<T>& grad_y, double logdet_weight);
  void collect(std::vector<Param<T>>& out, const std::string& prefix);
  void clear_cache() { cache_.reset(); }

  // Smallest |pre-activation| seen by either ReLU in the last forward.
  double min_abs_preactivation() const;

  Tensor<T> w1, b1, w2, b2, w3, b3;
  Tensor<T> gw1, gb1, gw2, gb2, gw3, gb3;

 private:
  struct NetOut {
    Tensor<T> h1, a1, h2, a2, shift, raw;
  };
  NetOut run_net(const Tensor<T>& x1) const;

  struct Cache {
    Tensor<T> x1, x2;
    NetOut net;
  };
  std::optional<Cache> cache_;
};

// Keeps the first half of the channels; the second half z leaves the flow as a
// latent with density N(mean, exp(logs)^2), (mean, logs) = prior(first half).
template <typename T>
class Split {
 public:
  Split() = default;
  explicit Split(std::size_t channels);

  struct Out {
    Tensor<T> retained;
    Tensor<T> z;
  };
  Out forward(const Tensor<T>& x, LogVec& logp);
  Tensor<T> inverse(const Tensor<T>& retained, const Tensor<T>& z) const;
  // Draws z = mean + temperature * exp(logs) * eps, then re-attaches it.
  Tensor<T> sample(const Tensor<T>& retained, double temperature, std::mt19937_64& rng) const;
  // grad_retained is dLoss/dretained from downstream; logp_weight is dLoss/dlogp_n.
  Tensor<T> backward(const Tensor<T>& grad_retained, double logp_weight);
  void collect(std::vector<Param<T>>& out, const std::string& prefix);
  void clear_cache() { cache_.reset(); }

  Tensor<T> weight, bias;  // zero-initialized 3x3 conv, C/2 -> C
  Tensor<T> grad_weight, grad_bias;

 private:
  struct Cache {
    Tensor<T> retained, z, prior;
  };
  std::optional<Cache> cache_;
};

template <typename T>
struct FlowStep {
  FincFlowUnit<T> unit;
  std::array<Tensor<T>, 4> unit_grads;
  ActNorm<T> actnorm;
  Inv1x1<T> inv1x1;
  Coupling<T> coupling;
  Tensor<T> unit_cache;
};

// (N,C,H,W) -> (N,4C,H/2,W/2); channel c*4 + 2*dy + dx holds pixel (2i+dy, 2j+dx).
template <typename T>
Tensor<T> squeeze(const Tensor<T>& x);
template <typename T>
Tensor<T> unsqueeze(const Tensor<T>& y);

// Sum over (C,H,W) of the Gaussian log-density of z under (mean, logs), per sample.
template <typename T>
LogVec gaussian_logp(const Tensor<T>& z, const Tensor<T>& mean, const Tensor<T>& logs);

struct ModelConfig {
  std::size_t levels = 2;  // L
  std::size_t steps = 4;   // K, flow steps per level
  std::size_t channels = 4;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t hidden = 64;  // coupling net width
  std::size_t kernel = 3;   // k of the padded convolution blocks

  // Throws InvalidConfig when H or W is not divisible by 2^L or any count is zero.
  void validate() const;
  std::size_t dims() const { return channels * height * width; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
using LatentStack = std::vector<Tensor<T>>;

template <typename T>
struct ModelForward {
  LatentStack<T> latents;  // one per split, then the final output
  LogVec logdet;           // per sample, all layers
  LogVec logp;             // per sample, all latents

  double logdet_total() const;
  double logp_total() const;
};

// Multi-scale stack: (L-1) x {squeeze, K steps, split}, then squeeze, K steps.
template <typename T>
class FlowModel {
 public:
  FlowModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  Shape input_shape(std::size_t batch) const;
  // Shape of each latent for one sample.
  std::vector<Shape> latent_shapes(std::size_t batch) const;

  ModelForward<T> forward(const Tensor<T>& x);
  // Gradient of the mean over the batch of -(logp_n + logdet_n) for the last
  // forward. Accumulates into every parameter gradient; returns dLoss/dx.
  Tensor<T> backward();
  Tensor<T> inverse(const LatentStack<T>& latents) const;
  Tensor<T> sample(std::size_t n, double temperature, std::uint64_t seed) const;

  std::vector<Param<T>> params();
  void zero_grad();
  // Zeroes anchor-tap gradients of every padded convolution block.
  void mask_gradients();
  // Resets anchor taps of every block to the channel identity.
  void apply_masks();
  bool masks_intact() const;
  bool actnorm_initialized() const;
  void set_actnorm_initialized(bool v);

  // Identity everywhere: identity kernels and 1x1 weights, actnorm 1/0
  // (marked initialized), zeroed coupling outputs and priors.
  void make_identity();
  // Adds U(-magnitude, magnitude) to every parameter, then restores masks.
  void perturb(std::uint64_t seed, double magnitude);
  // Smallest |ReLU input| over all couplings in the last forward.
  double min_abs_preactivation() const;

  int workers = 1;  // threads for wavefront inversion

 private:
  struct Level {
    std::vector<FlowStep<T>> steps;
    std::optional<Split<T>> split;
  };

  Tensor<T> step_forward(FlowStep<T>& s, const Tensor<T>& x, LogVec& logdet);
  Tensor<T> step_inverse(const FlowStep<T>& s, const Tensor<T>& y) const;
  Tensor<T> step_backward(FlowStep<T>& s, const Tensor<T>& grad, double weight);
  template <typename ZSource>
  Tensor<T> run_inverse(const Tensor<T>& top, ZSource&& next_z) const;

  ModelConfig config_;
  std::vector<Level> levels_;
  Tensor<T> top_mean_, top_logs_;  // (1, C_top, H_top, W_top)
  Tensor<T> grad_top_mean_, grad_top_logs_;
  std::optional<Tensor<T>> top_cache_;
  std::size_t batch_cache_ = 0;
};

}  // namespace fincflow
