// SPDX-License-Identifier: Apache-2.0
//
// Per-unit Gaussian KL, reparameterized sampling and the two likelihood heads.

#pragma once

#include "dctvae/autodiff.hpp"

namespace dctvae {

inline constexpr double kLogstdMin = -7.0;
inline constexpr double kLogstdMax = 2.0;

// KL(N(qm, e^qls) || N(pm, e^pls)) for one unit.
double gaussian_kl(double q_mean, double q_logstd, double p_mean, double p_logstd);

template <class T>
Tensor<T> gaussian_kl(const Tensor<T>& q_mean, const Tensor<T>& q_logstd, const Tensor<T>& p_mean,
                      const Tensor<T>& p_logstd);

// Elementwise per-unit KL, same shape as the inputs.
template <class T>
Var<T> gaussian_kl(Var<T> q_mean, Var<T> q_logstd, Var<T> p_mean, Var<T> p_logstd);
// Against N(0, 1).
template <class T>
Var<T> standard_normal_kl(Var<T> q_mean, Var<T> q_logstd);

// mean + tau * exp(logstd) * noise
template <class T>
Tensor<T> reparam_sample(const Tensor<T>& mean, const Tensor<T>& logstd, const Tensor<T>& noise, T tau);
template <class T>
Var<T> reparam_sample(Var<T> mean, Var<T> logstd, const Tensor<T>& noise, T tau);

// Sum over each item of x log sigmoid(l) + (1-x) log(1 - sigmoid(l)); shape [B].
// Throws if x is not binary.
template <class T>
Var<T> bernoulli_loglik(Var<T> logits, const Tensor<T>& x);

// Quantization bins around each coordinate's grid points. Both tensors have the
// per-item shape; a value within half a bin of +/-edge owns the open tail.
struct BinGrid {
  Tensor<double> halfwidth;
  Tensor<double> edge;
};

// 256 levels on [-1, 1]: half width 1/255, edge 1.
BinGrid pixel_grid(const Shape& item_shape);

// log of the N(mean, sigma) mass on the bin of x, with its derivatives in mean
// and log sigma.
struct BinLogMass {
  double value;
  double d_mean;
  double d_logstd;
};
BinLogMass log_bin_mass(double x, double mean, double logstd, double halfwidth, double edge);

// Per-item sum of log bin masses; x, mean, logstd are [B, ...item].
template <class T>
Var<T> discretized_gaussian_loglik(Var<T> mean, Var<T> logstd, const Tensor<T>& x, const BinGrid& grid);

// Image head on the 256-level [-1, 1] grid. Throws if x is off the grid.
template <class T>
Var<T> discretized_gaussian_loglik_pixel(Var<T> mean, Var<T> logstd, const Tensor<T>& x);

// Nearest grid point of a draw from each bin distribution (mean + sigma * noise).
template <class T>
Tensor<T> round_to_grid(const Tensor<T>& values, const BinGrid& grid);

}  // namespace dctvae
