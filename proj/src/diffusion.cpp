// SPDX-License-Identifier: Apache-2.0

#include "dctvae/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace dctvae {

NoiseSchedule build_schedule(std::vector<double> betas) {
  if (betas.empty()) throw std::invalid_argument("build_schedule: need at least one step");
  for (std::size_t i = 0; i < betas.size(); ++i)
    if (!(betas[i] > 0 && betas[i] < 1) || (i && betas[i] < betas[i - 1]))
      throw std::invalid_argument("build_schedule: betas must be non-decreasing in (0, 1)");
  NoiseSchedule s;
  s.steps = static_cast<int>(betas.size());
  s.beta = std::move(betas);
  double prod = 1.0;
  for (std::size_t i = 0; i < s.beta.size(); ++i) {
    s.alpha.push_back(1.0 - s.beta[i]);
    prod *= s.alpha.back();
    s.alpha_bar.push_back(prod);
    s.beta_tilde.push_back(i == 0 ? 0.0 : (1.0 - s.alpha_bar[i - 1]) / (1.0 - s.alpha_bar[i]) * s.beta[i]);
  }
  return s;
}

NoiseSchedule build_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("build_schedule: steps must be >= 1");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
    throw std::invalid_argument("build_schedule: need 0 < beta_start <= beta_end < 1");
  std::vector<double> b(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t)
    b[static_cast<std::size_t>(t)] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (steps - 1);
  return build_schedule(std::move(b));
}

namespace {

void require_step(int t, int lo, const NoiseSchedule& s, const char* what) {
  if (t < lo || t > s.steps)
    throw std::invalid_argument(std::string(what) + ": step " + std::to_string(t) + " outside [" +
                                std::to_string(lo) + ", " + std::to_string(s.steps) + "]");
}

}  // namespace

template <class T>
Tensor<T> forward_marginal(const Tensor<T>& y0, int t, const Tensor<T>& noise, const NoiseSchedule& s) {
  require_step(t, 1, s, "forward_marginal");
  require_same_shape(y0, noise, "forward_marginal");
  const double a = std::sqrt(s.alpha_bar_at(t)), b = std::sqrt(1.0 - s.alpha_bar_at(t));
  Tensor<T> out(y0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(a * y0[i] + b * noise[i]);
  return out;
}

PosteriorParams posterior_params(const Tensor<double>& y_t, const Tensor<double>& y0, int t, const NoiseSchedule& s) {
  require_step(t, 2, s, "posterior_params");
  require_same_shape(y_t, y0, "posterior_params");
  const double ab = s.alpha_bar_at(t), ab_prev = s.alpha_bar_at(t - 1);
  const double c0 = std::sqrt(ab_prev) * s.beta_at(t) / (1.0 - ab);
  const double ct = std::sqrt(s.alpha_at(t)) * (1.0 - ab_prev) / (1.0 - ab);
  PosteriorParams p{Tensor<double>(y0.shape()), s.beta_tilde_at(t)};
  for (std::size_t i = 0; i < y0.size(); ++i) p.mean[i] = c0 * y0[i] + ct * y_t[i];
  return p;
}

template <class T>
Denoiser<T>::Denoiser(const DiffusionConfig& cfg, int channels, ParameterStore<T>& store, Rng& rng)
    : steps_(cfg.steps) {
  cfg.validate();
  const int w = cfg.width;
  in_ = make_conv(store, "prior.in", channels, w, 3, rng);
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string base = "prior.b" + std::to_string(b);
    time_tables_.push_back(&store.add(base + ".time", Tensor<T>({steps_, w})));
    blocks_.push_back(make_block(store, base, w, std::max(1, w / 2), w, true, rng,
                                 1.0 / std::sqrt(static_cast<double>(cfg.blocks))));
  }
  out_ = make_conv(store, "prior.out", w, channels, 3, rng, 0.1);
}

template <class T>
Var<T> Denoiser<T>::operator()(Tape<T>& tape, Var<T> y_t, const std::vector<int>& t) const {
  if (y_t.shape().empty() || static_cast<int>(t.size()) != y_t.dim(0))
    throw std::invalid_argument("denoiser: need one step per item");
  std::vector<int> rows(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] < 1 || t[i] > steps_) throw std::invalid_argument("denoiser: step " + std::to_string(t[i]) + " out of range");
    rows[i] = t[i] - 1;
  }
  auto h = in_(tape, y_t);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    h = add_channel_bias(h, gather_rows(tape.parameter(*time_tables_[b]), rows));
    h = blocks_[b](tape, h);
  }
  return out_(tape, silu(h));
}

template <class T>
Var<T> reverse_mean(Var<T> y_t, Var<T> eps_hat, int t, const NoiseSchedule& s) {
  require_step(t, 1, s, "reverse_mean");
  const T c_eps = static_cast<T>(s.beta_at(t) / std::sqrt(1.0 - s.alpha_bar_at(t)));
  const T c_out = static_cast<T>(1.0 / std::sqrt(s.alpha_at(t)));
  return scale(sub(y_t, scale(eps_hat, c_eps)), c_out);
}

template <class T>
std::vector<Tensor<T>> draw_vlb_noise(const Shape& y0_shape, int steps, Rng& rng) {
  std::normal_distribution<double> n01;
  std::vector<Tensor<T>> out;
  for (int t = 0; t < steps; ++t) {
    Tensor<T> e(y0_shape);
    for (T& v : e.values()) v = static_cast<T>(n01(rng));
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<int> sample_steps(int batch, int steps, Rng& rng) {
  if (steps < 2) return {};
  std::uniform_int_distribution<int> d(2, steps);
  std::vector<int> t(static_cast<std::size_t>(batch));
  for (int& v : t) v = d(rng);
  return t;
}

std::vector<double> terminal_kl(const Tensor<double>& y0, const NoiseSchedule& s) {
  const int batch = y0.dim(0);
  const std::size_t per = y0.size() / static_cast<std::size_t>(batch);
  const double ab = s.alpha_bar.back();
  const double logstd = 0.5 * std::log(1.0 - ab);
  std::vector<double> out(static_cast<std::size_t>(batch), 0.0);
  for (std::size_t i = 0; i < y0.size(); ++i) out[i / per] += gaussian_kl(std::sqrt(ab) * y0[i], logstd, 0.0, 0.0);
  return out;
}

namespace {

// Items of `src` at rows `idx`, stacked.
template <class T>
Tensor<T> take_rows(const Tensor<T>& src, const std::vector<int>& idx) {
  const std::size_t per = src.size() / static_cast<std::size_t>(src.dim(0));
  Shape s = src.shape();
  s[0] = static_cast<int>(idx.size());
  Tensor<T> out(s);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(src.data() + static_cast<std::size_t>(idx[r]) * per, per, out.data() + r * per);
  return out;
}

}  // namespace

template <class T>
VlbResult<T> vlb_loss(Tape<T>& tape, const Denoiser<T>& denoiser, const Tensor<T>& y0, const BinGrid& grid,
                      const NoiseSchedule& s, const std::vector<Tensor<T>>& noise,
                      const std::optional<std::vector<int>>& sampled_t) {
  if (denoiser.steps() != s.steps) throw std::invalid_argument("vlb_loss: denoiser and schedule disagree on steps");
  if (static_cast<int>(noise.size()) != s.steps) throw std::invalid_argument("vlb_loss: need noise for every step");
  const int batch = y0.dim(0);
  const std::size_t per = y0.size() / static_cast<std::size_t>(batch);
  const Tensor<double> y0d = y0.template cast<double>();
  VlbResult<T> r;
  r.terminal = terminal_kl(y0d, s);

  // L_0: discretized Gaussian around the reverse mean from y_1.
  const auto y1 = forward_marginal(y0, 1, noise[0], s);
  auto y1v = tape.constant(y1);
  auto mean0 = reverse_mean(y1v, denoiser(tape, y1v, std::vector<int>(static_cast<std::size_t>(batch), 1)), 1, s);
  auto logstd0 = tape.constant(Tensor<T>(y0.shape(), static_cast<T>(0.5 * std::log(s.final_variance()))));
  auto l0 = scale(discretized_gaussian_loglik(mean0, logstd0, y0, grid), T(-1));
  r.l0.assign(l0.value().values().begin(), l0.value().values().end());

  // Middle KL terms, each (posterior mean - reverse mean)^2 / (2 beta_tilde).
  std::optional<Var<T>> middle;
  r.middle.assign(static_cast<std::size_t>(batch), 0.0);
  auto add_term = [&](const std::vector<int>& ts, const std::vector<double>& weight) {
    Tensor<T> yt(y0.shape());
    Tensor<T> mu_tilde(y0.shape());
    std::vector<T> c_eps(ts.size()), c_out(ts.size()), w(ts.size());
    for (int b = 0; b < batch; ++b) {
      const int t = ts[static_cast<std::size_t>(b)];
      const double ab = s.alpha_bar_at(t), sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
      const double c0 = std::sqrt(s.alpha_bar_at(t - 1)) * s.beta_at(t) / (1.0 - ab);
      const double ct = std::sqrt(s.alpha_at(t)) * (1.0 - s.alpha_bar_at(t - 1)) / (1.0 - ab);
      const Tensor<T>& e = noise[static_cast<std::size_t>(t - 1)];
      for (std::size_t j = b * per; j < (b + 1) * per; ++j) {
        const double ytv = sa * y0[j] + sb * e[j];
        yt[j] = static_cast<T>(ytv);
        mu_tilde[j] = static_cast<T>(c0 * y0[j] + ct * static_cast<double>(yt[j]));
      }
      c_eps[static_cast<std::size_t>(b)] = static_cast<T>(-s.beta_at(t) / sb);
      c_out[static_cast<std::size_t>(b)] = static_cast<T>(1.0 / std::sqrt(s.alpha_at(t)));
      w[static_cast<std::size_t>(b)] = static_cast<T>(weight[static_cast<std::size_t>(b)] / (2.0 * s.beta_tilde_at(t)));
    }
    auto ytv = tape.constant(yt);
    auto eps_hat = denoiser(tape, ytv, ts);
    auto mean = scale_per_item(add(ytv, scale_per_item(eps_hat, c_eps)), c_out);
    auto diff = sub(tape.constant(mu_tilde), mean);
    auto term = scale_per_item(sum_per_item(mul(diff, diff)), w);
    for (int b = 0; b < batch; ++b) r.middle[static_cast<std::size_t>(b)] += term.value()[static_cast<std::size_t>(b)];
    middle = middle ? add(*middle, term) : term;
  };
  if (sampled_t) {
    if (s.steps >= 2) {
      if (static_cast<int>(sampled_t->size()) != batch) throw std::invalid_argument("vlb_loss: need one step per item");
      for (int t : *sampled_t) require_step(t, 2, s, "vlb_loss");
      add_term(*sampled_t, std::vector<double>(static_cast<std::size_t>(batch), s.steps - 1.0));
    }
  } else {
    for (int t = 2; t <= s.steps; ++t)
      add_term(std::vector<int>(static_cast<std::size_t>(batch), t), std::vector<double>(static_cast<std::size_t>(batch), 1.0));
  }

  Tensor<T> lt({batch});
  for (int b = 0; b < batch; ++b) lt[static_cast<std::size_t>(b)] = static_cast<T>(r.terminal[static_cast<std::size_t>(b)]);
  auto total = add(l0, tape.constant(lt));
  r.total = middle ? add(total, *middle) : total;
  return r;
}

template <class T>
Tensor<T> ancestral_sample(const Denoiser<T>& denoiser, const NoiseSchedule& s, const BinGrid& grid,
                           const Shape& item_shape, int count, Rng& rng) {
  Shape shape{count};
  shape.insert(shape.end(), item_shape.begin(), item_shape.end());
  std::normal_distribution<double> n01;
  Tensor<T> y(shape);
  for (T& v : y.values()) v = static_cast<T>(n01(rng));
  for (int t = s.steps; t >= 1; --t) {
    Tape<T> tape;
    auto yv = tape.constant(y);
    auto mean = reverse_mean(yv, denoiser(tape, yv, std::vector<int>(static_cast<std::size_t>(count), t)), t, s).value();
    const double sd = std::sqrt(t > 1 ? s.beta_tilde_at(t) : s.final_variance());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<T>(mean[i] + sd * n01(rng));
  }
  return round_to_grid(y, grid);
}

#define DCTVAE_INSTANTIATE_DIFFUSION(T)                                                                     \
  template Tensor<T> forward_marginal<T>(const Tensor<T>&, int, const Tensor<T>&, const NoiseSchedule&);    \
  template class Denoiser<T>;                                                                               \
  template Var<T> reverse_mean<T>(Var<T>, Var<T>, int, const NoiseSchedule&);                               \
  template std::vector<Tensor<T>> draw_vlb_noise<T>(const Shape&, int, Rng&);                               \
  template VlbResult<T> vlb_loss<T>(Tape<T>&, const Denoiser<T>&, const Tensor<T>&, const BinGrid&,         \
                                    const NoiseSchedule&, const std::vector<Tensor<T>>&,                    \
                                    const std::optional<std::vector<int>>&);                                \
  template Tensor<T> ancestral_sample<T>(const Denoiser<T>&, const NoiseSchedule&, const BinGrid&, const Shape&, \
                                         int, Rng&);

DCTVAE_INSTANTIATE_DIFFUSION(float)
DCTVAE_INSTANTIATE_DIFFUSION(double)

}  // namespace dctvae
