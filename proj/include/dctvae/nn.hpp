// SPDX-License-Identifier: Apache-2.0
//
// Parameterized layers shared by the VAE and the diffusion denoiser.

#pragma once

#include <random>
#include <string>

#include "dctvae/autodiff.hpp"
#include "dctvae/ops.hpp"

namespace dctvae {

using Rng = std::mt19937_64;

template <class T>
struct Conv {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  int padding = 0;

  int in_channels() const { return weight->value().dim(1); }
  int out_channels() const { return weight->value().dim(0); }
  Var<T> operator()(Tape<T>& tape, Var<T> x) const;
};

// Weights ~ N(0, gain^2 / fan_in), zero bias. Odd kernel, "same" padding.
template <class T>
Conv<T> make_conv(ParameterStore<T>& store, const std::string& name, int in, int out, int kernel, Rng& rng,
                  double gain = 1.0);

// silu -> 1x1 in->mid -> silu -> 3x3 mid->mid -> silu -> 1x1 mid->out,
// plus the input when `residual`.
template <class T>
struct Block {
  Conv<T> reduce, spatial, expand;
  bool residual = false;

  Var<T> operator()(Tape<T>& tape, Var<T> x) const;
};

template <class T>
Block<T> make_block(ParameterStore<T>& store, const std::string& name, int in, int mid, int out, bool residual,
                    Rng& rng, double out_gain = 1.0);

}  // namespace dctvae
