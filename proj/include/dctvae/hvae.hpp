// SPDX-License-Identifier: Apache-2.0
//
// Top-down hierarchical VAE with optional context conditioning.
//
// Slots are numbered from the top: with a context, slot 0 is the context and
// latent layer i sits in slot i + 1; without one, layer i is slot i.

#pragma once

#include <optional>
#include <vector>

#include "dctvae/config.hpp"
#include "dctvae/nn.hpp"

namespace dctvae {

// Standard-normal noise for every latent layer, [B, channels, r, r] each.
template <class T>
struct NoiseBank {
  std::vector<Tensor<T>> layers;
  int batch() const { return layers.empty() ? 0 : layers.front().dim(0); }
};

template <class T>
NoiseBank<T> draw_noise(const ModelConfig& cfg, int batch, Rng& rng);

enum class SampleMode { kUnconditional, kReconstruction, kPartial };

struct SampleRequest {
  SampleMode mode = SampleMode::kReconstruction;
  int m = 0;          // partial mode: slots taken from the posterior
  double tau = 1.0;   // prior standard-deviation scale for prior draws

  // Posterior slot count for a model with `slots` slots.
  int posterior_slots(int slots) const;
};

template <class T>
struct LayerState {
  bool from_posterior = false;
  bool standard_prior = false;
  Var<T> p_mean, p_logstd;
  std::optional<Var<T>> q_mean, q_logstd;
  Var<T> z;
  std::optional<Var<T>> kl;  // per unit, posterior layers only
};

template <class T>
struct TopDownResult {
  std::vector<LayerState<T>> layers;
  // Bernoulli: logits. Discretized Gaussian: per-pixel mean and log std.
  Var<T> out_a;
  std::optional<Var<T>> out_b;
};

template <class T>
class Hvae {
 public:
  // Registers parameters under "vae." in `store`.
  Hvae(ModelConfig cfg, ParameterStore<T>& store, Rng& rng);

  const ModelConfig& config() const { return cfg_; }

  // Maps likelihood-scale targets ({0,1} or the [-1,1] grid) to encoder input.
  Tensor<T> encoder_input(const Tensor<T>& x) const;
  // Maps a decoded context in pixel units [0, pixel_max] to model scale.
  static Tensor<T> context_input(const Tensor<double>& pixels, double pixel_max);

  // Per-scale encoder features, coarsest scale first.
  std::vector<Var<T>> bottom_up(Tape<T>& tape, Var<T> x_in) const;

  // `features` must be present whenever the request uses the posterior;
  // `context` (model scale, [B,Ch,D,D]) must be present iff the model has one.
  TopDownResult<T> top_down(Tape<T>& tape, const std::vector<Var<T>>* features, std::optional<Var<T>> context,
                            const SampleRequest& request, const NoiseBank<T>& noise) const;

  // Per-image log-likelihood of targets x, shape [B].
  Var<T> log_likelihood(const TopDownResult<T>& r, const Tensor<T>& x) const;

  // Mean image on the likelihood scale: probabilities, or means clipped to [-1,1].
  Tensor<T> mean_image(const TopDownResult<T>& r) const;

 private:
  struct Layer {
    int resolution;
    bool standard_prior;
    std::optional<Block<T>> prior;
    Block<T> posterior;
    Conv<T> z_proj;
    Block<T> res;
  };
  struct Scale {
    int resolution;
    std::optional<Conv<T>> context_proj;
    std::vector<Block<T>> encoder;
  };

  ModelConfig cfg_;
  Conv<T> stem_, stem_proj_;
  std::vector<Scale> scales_;
  std::vector<Layer> layers_;
  Parameter<T>* top_state_ = nullptr;
  std::optional<Conv<T>> out_context_proj_;
  Conv<T> out_;
};

}  // namespace dctvae
