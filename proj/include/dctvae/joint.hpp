// SPDX-License-Identifier: Apache-2.0
//
// The VAE, its context codec and the diffusion prior over the context, with
// the joint negative bound used for training and evaluation.

#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "dctvae/context.hpp"
#include "dctvae/diffusion.hpp"
#include "dctvae/hvae.hpp"

namespace dctvae {

// Upper end of the pixel range seen by the codec: 1 for binary images, 255
// otherwise.
double pixel_max_for(Likelihood l);

// Builds the codec described by a model config, fitting S on `train_pixels`
// ([N, Ch, D, D] in codec pixel units) in dct mode.
std::optional<ContextCodec> make_codec(const ModelConfig& cfg, const Tensor<double>& train_pixels);

template <class T>
class JointModel {
 public:
  JointModel(RunConfig cfg, std::optional<ContextCodec> codec, std::uint64_t init_seed);
  JointModel(const JointModel&) = delete;
  JointModel& operator=(const JointModel&) = delete;

  const RunConfig& config() const { return cfg_; }
  const ModelConfig& model_config() const { return cfg_.model; }
  ParameterStore<T>& params() { return *store_; }
  const ParameterStore<T>& params() const { return *store_; }
  const Hvae<T>& vae() const { return *vae_; }
  const Denoiser<T>* prior() const { return prior_.get(); }
  const ContextCodec* codec() const { return codec_ ? &*codec_ : nullptr; }
  const NoiseSchedule& schedule() const { return schedule_; }
  double pixel_max() const { return pixel_max_for(cfg_.model.likelihood); }
  int slots() const { return cfg_.model.slots(); }
  // Bins of the normalized context grid, per item.
  const BinGrid& context_grid() const { return grid_; }

 private:
  RunConfig cfg_;
  std::unique_ptr<ParameterStore<T>> store_;
  std::optional<ContextCodec> codec_;
  std::unique_ptr<Hvae<T>> vae_;
  std::unique_ptr<Denoiser<T>> prior_;
  NoiseSchedule schedule_;
  BinGrid grid_;
};

// One minibatch in every representation the objective needs.
template <class T>
struct Batch {
  Tensor<double> pixels;  // codec pixel units
  Tensor<T> target;       // likelihood scale
  std::vector<ContextCode> codes;
  Tensor<T> context_y0;     // normalized codes [B, Ch, d, d]
  Tensor<T> context_image;  // decoded context, model scale [B, Ch, D, D]

  int size() const { return pixels.dim(0); }
};

template <class T>
Batch<T> make_batch(const JointModel<T>& model, Tensor<double> pixels);

// Decoded context images (model scale) for a set of codes.
template <class T>
Tensor<T> context_images(const JointModel<T>& model, const std::vector<ContextCode>& codes);

template <class T>
struct ObjectiveNoise {
  NoiseBank<T> latents;
  std::vector<Tensor<T>> diffusion;
  std::optional<std::vector<int>> steps;  // sampled diffusion step per item
};

// `sampled_steps` selects the single-step diffusion estimator.
template <class T>
ObjectiveNoise<T> draw_objective_noise(const JointModel<T>& model, int batch, bool sampled_steps, Rng& rng);

template <class T>
struct Objective {
  Var<T> loss;  // batch mean of `total`, shape [1]
  std::vector<double> recon, kl, diffusion, total;  // per item, nats
  TopDownResult<T> hierarchy;
};

// Negative joint bound per image: -log p(x|z) + sum of layer KLs + the
// context's diffusion bound. Without a context the top layer's KL is taken
// against N(0, I) and the diffusion part is zero.
template <class T>
Objective<T> joint_objective(Tape<T>& tape, const JointModel<T>& model, const Batch<T>& batch,
                             const ObjectiveNoise<T>& noise);

}  // namespace dctvae
