// SPDX-License-Identifier: Apache-2.0

#include "dctvae/nn.hpp"

#include <cmath>

namespace dctvae {

template <class T>
Var<T> Conv<T>::operator()(Tape<T>& tape, Var<T> x) const {
  return conv2d(x, tape.parameter(*weight), tape.parameter(*bias), 1, padding);
}

template <class T>
Conv<T> make_conv(ParameterStore<T>& store, const std::string& name, int in, int out, int kernel, Rng& rng,
                  double gain) {
  Tensor<T> w({out, in, kernel, kernel});
  std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(in * kernel * kernel)));
  for (T& v : w.values()) v = static_cast<T>(dist(rng));
  Conv<T> c;
  c.weight = &store.add(name + ".weight", std::move(w));
  c.bias = &store.add(name + ".bias", Tensor<T>({out}));
  c.padding = kernel / 2;
  return c;
}

template <class T>
Var<T> Block<T>::operator()(Tape<T>& tape, Var<T> x) const {
  auto h = reduce(tape, silu(x));
  h = spatial(tape, silu(h));
  h = expand(tape, silu(h));
  return residual ? add(x, h) : h;
}

template <class T>
Block<T> make_block(ParameterStore<T>& store, const std::string& name, int in, int mid, int out, bool residual,
                    Rng& rng, double out_gain) {
  if (residual && in != out) throw std::invalid_argument("make_block: residual block needs in == out");
  Block<T> b;
  b.reduce = make_conv(store, name + ".reduce", in, mid, 1, rng);
  b.spatial = make_conv(store, name + ".spatial", mid, mid, 3, rng);
  b.expand = make_conv(store, name + ".expand", mid, out, 1, rng, out_gain);
  b.residual = residual;
  return b;
}

template struct Conv<float>;
template struct Conv<double>;
template struct Block<float>;
template struct Block<double>;
template Conv<float> make_conv<float>(ParameterStore<float>&, const std::string&, int, int, int, Rng&, double);
template Conv<double> make_conv<double>(ParameterStore<double>&, const std::string&, int, int, int, Rng&, double);
template Block<float> make_block<float>(ParameterStore<float>&, const std::string&, int, int, int, bool, Rng&, double);
template Block<double> make_block<double>(ParameterStore<double>&, const std::string&, int, int, int, bool, Rng&,
                                          double);

}  // namespace dctvae
