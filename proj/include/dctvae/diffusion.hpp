// SPDX-License-Identifier: Apache-2.0
//
// Denoising diffusion prior over the normalized context grid. The denoiser
// predicts the added noise; reverse-step variances are fixed.

#pragma once

#include <optional>
#include <vector>

#include "dctvae/config.hpp"
#include "dctvae/likelihood.hpp"
#include "dctvae/nn.hpp"

namespace dctvae {

// Arrays are indexed by t - 1 for t = 1..steps.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta, alpha, alpha_bar, beta_tilde;

  double beta_at(int t) const { return beta.at(static_cast<std::size_t>(t - 1)); }
  double alpha_at(int t) const { return alpha.at(static_cast<std::size_t>(t - 1)); }
  double alpha_bar_at(int t) const { return alpha_bar.at(static_cast<std::size_t>(t - 1)); }
  // Zero at t = 1.
  double beta_tilde_at(int t) const { return beta_tilde.at(static_cast<std::size_t>(t - 1)); }
  // Variance of the final reverse step, p(y0 | y1).
  double final_variance() const { return beta.front(); }
};

NoiseSchedule build_schedule(int steps, double beta_start, double beta_end);
// Arbitrary increasing betas in (0, 1).
NoiseSchedule build_schedule(std::vector<double> betas);

template <class T>
Tensor<T> forward_marginal(const Tensor<T>& y0, int t, const Tensor<T>& noise, const NoiseSchedule& s);

struct PosteriorParams {
  Tensor<double> mean;
  double variance;
};
// q(y_{t-1} | y_t, y0) for 2 <= t <= steps.
PosteriorParams posterior_params(const Tensor<double>& y_t, const Tensor<double>& y0, int t, const NoiseSchedule& s);

template <class T>
class Denoiser {
 public:
  // Registers parameters under "prior." in `store`.
  Denoiser(const DiffusionConfig& cfg, int channels, ParameterStore<T>& store, Rng& rng);

  // Predicted noise for y_t [B, Ch, d, d] with per-item steps t (1-based).
  Var<T> operator()(Tape<T>& tape, Var<T> y_t, const std::vector<int>& t) const;
  int steps() const { return steps_; }

 private:
  int steps_;
  Conv<T> in_, out_;
  std::vector<Parameter<T>*> time_tables_;
  std::vector<Block<T>> blocks_;
};

// Reverse-step mean from y_t and predicted noise.
template <class T>
Var<T> reverse_mean(Var<T> y_t, Var<T> eps_hat, int t, const NoiseSchedule& s);

// Noise for every forward marginal, one [B, ...] tensor per t.
template <class T>
std::vector<Tensor<T>> draw_vlb_noise(const Shape& y0_shape, int steps, Rng& rng);

template <class T>
struct VlbResult {
  Var<T> total;  // [B], nats
  std::vector<double> l0, middle, terminal;  // per item
};

// Negative variational bound -log p(y0) <= L_0 + sum_t L_{t-1} + L_T per item.
// With `sampled_t` (one t in 2..steps per item) the middle sum is replaced by
// (steps - 1) times that single term; otherwise all terms are summed.
template <class T>
VlbResult<T> vlb_loss(Tape<T>& tape, const Denoiser<T>& denoiser, const Tensor<T>& y0, const BinGrid& grid,
                      const NoiseSchedule& s, const std::vector<Tensor<T>>& noise,
                      const std::optional<std::vector<int>>& sampled_t = std::nullopt);

// One t uniformly from 2..steps per item (empty when steps == 1).
std::vector<int> sample_steps(int batch, int steps, Rng& rng);

// KL(q(y_T | y0) || N(0, I)) per item, closed form.
std::vector<double> terminal_kl(const Tensor<double>& y0, const NoiseSchedule& s);

// Ancestral samples [count, item...], always on the grid.
template <class T>
Tensor<T> ancestral_sample(const Denoiser<T>& denoiser, const NoiseSchedule& s, const BinGrid& grid,
                           const Shape& item_shape, int count, Rng& rng);

}  // namespace dctvae
