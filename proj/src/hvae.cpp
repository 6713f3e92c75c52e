// SPDX-License-Identifier: Apache-2.0

#include "dctvae/hvae.hpp"

#include <algorithm>
#include <cmath>

#include "dctvae/likelihood.hpp"

namespace dctvae {

template <class T>
NoiseBank<T> draw_noise(const ModelConfig& cfg, int batch, Rng& rng) {
  std::normal_distribution<double> n01;
  NoiseBank<T> bank;
  for (int r : cfg.latent_layers) {
    Tensor<T> e({batch, cfg.latent_channels, r, r});
    for (T& v : e.values()) v = static_cast<T>(n01(rng));
    bank.layers.push_back(std::move(e));
  }
  return bank;
}

int SampleRequest::posterior_slots(int slots) const {
  switch (mode) {
    case SampleMode::kUnconditional: return 0;
    case SampleMode::kReconstruction: return slots;
    case SampleMode::kPartial:
      if (m < 0 || m > slots)
        throw std::invalid_argument("partial sampling: m=" + std::to_string(m) + " outside [0, " +
                                    std::to_string(slots) + "]");
      return m;
  }
  return 0;
}

template <class T>
Hvae<T>::Hvae(ModelConfig cfg, ParameterStore<T>& store, Rng& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int ch = cfg_.image_channels, hid = cfg_.hidden_width, mid = cfg_.mid_width, zc = cfg_.latent_channels;
  const double depth_gain = 1.0 / std::sqrt(static_cast<double>(cfg_.latent_layers.size()));
  stem_ = make_conv(store, "vae.enc.stem", ch, cfg_.input_width, 3, rng);
  stem_proj_ = make_conv(store, "vae.enc.proj", cfg_.input_width, hid, 1, rng);
  for (int r : cfg_.scales()) {
    Scale s;
    s.resolution = r;
    const std::string base = "vae.s" + std::to_string(r);
    if (cfg_.has_context()) s.context_proj = make_conv(store, base + ".context", ch, hid, 1, rng);
    for (int j = 0; j < cfg_.encoder_blocks; ++j)
      s.encoder.push_back(make_block(store, base + ".enc" + std::to_string(j), hid, mid, hid, true, rng, 0.5));
    scales_.push_back(std::move(s));
  }
  const int r0 = cfg_.latent_layers.front();
  top_state_ = &store.add("vae.dec.top", Tensor<T>({hid, r0, r0}));
  for (std::size_t i = 0; i < cfg_.latent_layers.size(); ++i) {
    const std::string base = "vae.dec.l" + std::to_string(i);
    const bool standard = !cfg_.has_context() && i == 0;
    std::optional<Block<T>> prior;
    if (!standard) {
      prior = make_block(store, base + ".prior", hid, mid, 2 * zc + hid, false, rng, 0.1);
      // The state update slice starts at zero.
      Tensor<T>& w = prior->expand.weight->value();
      std::fill(w.data() + static_cast<std::size_t>(2 * zc) * mid, w.data() + w.size(), T(0));
    }
    layers_.push_back(Layer{cfg_.latent_layers[i], standard, std::move(prior),
                            make_block(store, base + ".posterior", 2 * hid, mid, 2 * zc, false, rng, 0.1),
                            make_conv(store, base + ".z", zc, hid, 1, rng, depth_gain),
                            make_block(store, base + ".res", hid, mid, hid, true, rng, depth_gain)});
  }
  if (cfg_.has_context()) out_context_proj_ = make_conv(store, "vae.out.context", ch, hid, 1, rng);
  const int out_ch = cfg_.likelihood == Likelihood::kBernoulli ? ch : 2 * ch;
  out_ = make_conv(store, "vae.out", hid, out_ch, 3, rng);
}

template <class T>
Tensor<T> Hvae<T>::encoder_input(const Tensor<T>& x) const {
  if (cfg_.likelihood == Likelihood::kDiscretizedGaussian) return x;
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = T(2) * x[i] - T(1);
  return out;
}

template <class T>
Tensor<T> Hvae<T>::context_input(const Tensor<double>& pixels, double pixel_max) {
  Tensor<T> out(pixels.shape());
  for (std::size_t i = 0; i < pixels.size(); ++i) out[i] = static_cast<T>(2.0 * pixels[i] / pixel_max - 1.0);
  return out;
}

template <class T>
std::vector<Var<T>> Hvae<T>::bottom_up(Tape<T>& tape, Var<T> x_in) const {
  const Shape expect{x_in.shape().empty() ? 0 : x_in.dim(0), cfg_.image_channels, cfg_.image_side, cfg_.image_side};
  if (x_in.shape() != expect)
    throw std::invalid_argument("bottom_up: input " + shape_str(x_in.shape()) + " does not match " +
                                shape_str(expect));
  const int finest = scales_.back().resolution;
  auto h = stem_proj_(tape, avg_pool(silu(stem_(tape, x_in)), cfg_.image_side / finest));
  std::vector<Var<T>> features(scales_.size());
  for (std::size_t s = scales_.size(); s-- > 0;) {
    for (const auto& b : scales_[s].encoder) h = b(tape, h);
    features[s] = h;
    if (s > 0) h = avg_pool(h, scales_[s].resolution / scales_[s - 1].resolution);
  }
  return features;
}

template <class T>
TopDownResult<T> Hvae<T>::top_down(Tape<T>& tape, const std::vector<Var<T>>* features, std::optional<Var<T>> context,
                                   const SampleRequest& request, const NoiseBank<T>& noise) const {
  const int n_layers = static_cast<int>(layers_.size());
  if (static_cast<int>(noise.layers.size()) != n_layers)
    throw std::invalid_argument("top_down: noise bank has " + std::to_string(noise.layers.size()) +
                                " layers, model has " + std::to_string(n_layers));
  const int batch = noise.batch();
  const int offset = cfg_.has_context() ? 1 : 0;
  const int n_post = request.posterior_slots(cfg_.slots());
  if (n_post > offset && (!features || features->size() != scales_.size()))
    throw std::invalid_argument("top_down: posterior sampling requires encoder features of x");
  if (cfg_.has_context() != context.has_value())
    throw std::invalid_argument(cfg_.has_context() ? "top_down: model requires a context"
                                                   : "top_down: model has no context slot");
  const Shape full{batch, cfg_.image_channels, cfg_.image_side, cfg_.image_side};
  if (context && context->shape() != full)
    throw std::invalid_argument("top_down: context " + shape_str(context->shape()) + " does not match " +
                                shape_str(full));
  const int zc = cfg_.latent_channels, hid = cfg_.hidden_width;
  const T tau = static_cast<T>(request.tau);

  std::size_t scale = 0;
  auto inject = [&](Var<T> h) {
    if (!context) return h;
    const auto& s = scales_[scale];
    return add(h, (*s.context_proj)(tape, avg_pool(*context, cfg_.image_side / s.resolution)));
  };

  TopDownResult<T> result;
  auto h = inject(broadcast_batch(tape.parameter(*top_state_), batch));
  for (int i = 0; i < n_layers; ++i) {
    const Layer& layer = layers_[static_cast<std::size_t>(i)];
    if (noise.layers[static_cast<std::size_t>(i)].shape() != Shape{batch, zc, layer.resolution, layer.resolution})
      throw std::invalid_argument("top_down: noise for layer " + std::to_string(i) + " has shape " +
                                  shape_str(noise.layers[static_cast<std::size_t>(i)].shape()));
    if (layer.resolution != scales_[scale].resolution) {
      const int from = scales_[scale].resolution;
      ++scale;
      h = inject(nearest_upsample(h, layer.resolution / from));
    }
    LayerState<T> st;
    st.standard_prior = layer.standard_prior;
    st.from_posterior = i + offset < n_post;
    std::optional<Var<T>> h_add;
    if (layer.standard_prior) {
      st.p_mean = tape.constant(Tensor<T>({batch, zc, layer.resolution, layer.resolution}));
      st.p_logstd = st.p_mean;
    } else {
      auto po = (*layer.prior)(tape, h);
      st.p_mean = slice_channels(po, 0, zc);
      st.p_logstd = clamp(slice_channels(po, zc, zc), T(kLogstdMin), T(kLogstdMax));
      h_add = slice_channels(po, 2 * zc, hid);
    }
    const Tensor<T>& eps = noise.layers[static_cast<std::size_t>(i)];
    if (st.from_posterior) {
      auto qo = layer.posterior(tape, concat_channels(h, (*features)[scale]));
      st.q_mean = add(st.p_mean, slice_channels(qo, 0, zc));
      st.q_logstd = clamp(add(st.p_logstd, slice_channels(qo, zc, zc)), T(kLogstdMin), T(kLogstdMax));
      st.z = reparam_sample(*st.q_mean, *st.q_logstd, eps, T(1));
      st.kl = layer.standard_prior ? standard_normal_kl(*st.q_mean, *st.q_logstd)
                                   : gaussian_kl(*st.q_mean, *st.q_logstd, st.p_mean, st.p_logstd);
    } else {
      st.z = reparam_sample(st.p_mean, st.p_logstd, eps, tau);
    }
    h = add(h, layer.z_proj(tape, st.z));
    if (h_add) h = add(h, *h_add);
    h = layer.res(tape, h);
    result.layers.push_back(std::move(st));
  }
  h = nearest_upsample(h, cfg_.image_side / scales_[scale].resolution);
  if (context) h = add(h, (*out_context_proj_)(tape, *context));
  auto out = out_(tape, silu(h));
  if (cfg_.likelihood == Likelihood::kBernoulli) {
    result.out_a = out;
  } else {
    const int ch = cfg_.image_channels;
    result.out_a = slice_channels(out, 0, ch);
    result.out_b = clamp(slice_channels(out, ch, ch), T(kLogstdMin), T(kLogstdMax));
  }
  return result;
}

template <class T>
Var<T> Hvae<T>::log_likelihood(const TopDownResult<T>& r, const Tensor<T>& x) const {
  if (cfg_.likelihood == Likelihood::kBernoulli) return bernoulli_loglik(r.out_a, x);
  return discretized_gaussian_loglik_pixel(r.out_a, *r.out_b, x);
}

template <class T>
Tensor<T> Hvae<T>::mean_image(const TopDownResult<T>& r) const {
  Tensor<T> out = r.out_a.value();
  for (T& v : out.values())
    v = cfg_.likelihood == Likelihood::kBernoulli ? static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v))))
                                                  : std::clamp(v, T(-1), T(1));
  return out;
}

template class Hvae<float>;
template class Hvae<double>;
template NoiseBank<float> draw_noise<float>(const ModelConfig&, int, Rng&);
template NoiseBank<double> draw_noise<double>(const ModelConfig&, int, Rng&);

}  // namespace dctvae
