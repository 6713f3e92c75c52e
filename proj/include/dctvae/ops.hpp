// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives over [B, C, H, W] tensors.

#pragma once

#include <optional>
#include <type_traits>
#include <vector>

#include "dctvae/autodiff.hpp"

namespace dctvae {

// Cross-correlation. x: [B,Cin,H,W], w: [Cout,Cin,k,k], b: [Cout].
// Output [B,Cout,(H+2p-k)/s+1,(W+2p-k)/s+1]. k must be odd.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<std::type_identity_t<Var<T>>> b, int stride, int padding);

// Mean over non-overlapping window x window blocks.
template <class T>
Var<T> avg_pool(Var<T> x, int window);

// Replicates every cell into a factor x factor block.
template <class T>
Var<T> nearest_upsample(Var<T> x, int factor);

// x * sigmoid(x)
template <class T>
Var<T> silu(Var<T> x);

template <class T>
Var<T> add(Var<T> a, Var<T> b);
template <class T>
Var<T> sub(Var<T> a, Var<T> b);
template <class T>
Var<T> mul(Var<T> a, Var<T> b);
template <class T>
Var<T> scale(Var<T> x, T factor);
template <class T>
Var<T> exp(Var<T> x);
// Gradient passes only where lo <= x <= hi.
template <class T>
Var<T> clamp(Var<T> x, T lo, T hi);

// [C,H,W] -> [B,C,H,W]
template <class T>
Var<T> broadcast_batch(Var<T> x, int batch);
// x: [B,C,H,W] plus bias: [B,C] broadcast over space.
template <class T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias);
// Row lookup: table [N,C], returns [indices.size(), C].
template <class T>
Var<T> gather_rows(Var<T> table, std::vector<int> indices);

template <class T>
Var<T> concat_channels(Var<T> a, Var<T> b);
template <class T>
Var<T> slice_channels(Var<T> x, int start, int count);

// Sum of all elements, shape [1].
template <class T>
Var<T> sum(Var<T> x);
// Sum over everything but the leading extent, shape [B].
template <class T>
Var<T> sum_per_item(Var<T> x);
// x[b, ...] * factors[b]
template <class T>
Var<T> scale_per_item(Var<T> x, std::vector<T> factors);
// Mean of all elements, shape [1].
template <class T>
Var<T> mean(Var<T> x);

// Non-differentiable forward helpers shared with the codecs and metrics.
template <class T>
Tensor<T> avg_pool(const Tensor<T>& x, int window);
template <class T>
Tensor<T> nearest_upsample(const Tensor<T>& x, int factor);

}  // namespace dctvae
