// SPDX-License-Identifier: Apache-2.0

#include "dctvae/likelihood.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace dctvae {

double gaussian_kl(double q_mean, double q_logstd, double p_mean, double p_logstd) {
  const double d = q_mean - p_mean;
  return p_logstd - q_logstd + (std::exp(2 * q_logstd) + d * d) / (2 * std::exp(2 * p_logstd)) - 0.5;
}

template <class T>
Tensor<T> gaussian_kl(const Tensor<T>& q_mean, const Tensor<T>& q_logstd, const Tensor<T>& p_mean,
                      const Tensor<T>& p_logstd) {
  require_same_shape(q_mean, q_logstd, "gaussian_kl");
  require_same_shape(q_mean, p_mean, "gaussian_kl");
  require_same_shape(q_mean, p_logstd, "gaussian_kl");
  Tensor<T> out(q_mean.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(gaussian_kl(q_mean[i], q_logstd[i], p_mean[i], p_logstd[i]));
  return out;
}

template <class T>
Var<T> gaussian_kl(Var<T> q_mean, Var<T> q_logstd, Var<T> p_mean, Var<T> p_logstd) {
  require_same_shape(q_mean.value(), q_logstd.value(), "gaussian_kl");
  require_same_shape(q_mean.value(), p_mean.value(), "gaussian_kl");
  require_same_shape(q_mean.value(), p_logstd.value(), "gaussian_kl");
  const int qm = q_mean.id, qs = q_logstd.id, pm = p_mean.id, ps = p_logstd.id;
  return q_mean.tape->record(
      {qm, qs, pm, ps},
      [=](Tape<T>& t, int self) {
        t.mutable_value(self) = gaussian_kl(t.value(qm), t.value(qs), t.value(pm), t.value(ps));
      },
      [=](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>&a = t.value(qm), &b = t.value(qs), &c = t.value(pm), &e = t.value(ps);
        Tensor<T>* gqm = t.needs_grad(qm) ? &t.grad(qm) : nullptr;
        Tensor<T>* gqs = t.needs_grad(qs) ? &t.grad(qs) : nullptr;
        Tensor<T>* gpm = t.needs_grad(pm) ? &t.grad(pm) : nullptr;
        Tensor<T>* gps = t.needs_grad(ps) ? &t.grad(ps) : nullptr;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double inv_vp = std::exp(-2.0 * e[i]);
          const double d = static_cast<double>(a[i]) - c[i];
          const double vq = std::exp(2.0 * b[i]);
          if (gqm) (*gqm)[i] += static_cast<T>(g[i] * d * inv_vp);
          if (gpm) (*gpm)[i] -= static_cast<T>(g[i] * d * inv_vp);
          if (gqs) (*gqs)[i] += static_cast<T>(g[i] * (vq * inv_vp - 1.0));
          if (gps) (*gps)[i] += static_cast<T>(g[i] * (1.0 - (vq + d * d) * inv_vp));
        }
      });
}

template <class T>
Var<T> standard_normal_kl(Var<T> q_mean, Var<T> q_logstd) {
  Tape<T>& tape = *q_mean.tape;
  auto zero = tape.constant(Tensor<T>(q_mean.shape()));
  return gaussian_kl(q_mean, q_logstd, zero, zero);
}

template <class T>
Tensor<T> reparam_sample(const Tensor<T>& mean, const Tensor<T>& logstd, const Tensor<T>& noise, T tau) {
  require_same_shape(mean, logstd, "reparam_sample");
  require_same_shape(mean, noise, "reparam_sample");
  Tensor<T> out(mean.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mean[i] + tau * std::exp(logstd[i]) * noise[i];
  return out;
}

template <class T>
Var<T> reparam_sample(Var<T> mean, Var<T> logstd, const Tensor<T>& noise, T tau) {
  require_same_shape(mean.value(), logstd.value(), "reparam_sample");
  require_same_shape(mean.value(), noise, "reparam_sample");
  const int m = mean.id, s = logstd.id;
  return mean.tape->record(
      {m, s},
      [=](Tape<T>& t, int self) { t.mutable_value(self) = reparam_sample(t.value(m), t.value(s), noise, tau); },
      [=](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        if (t.needs_grad(m)) {
          Tensor<T>& gm = t.grad(m);
          for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
        }
        if (t.needs_grad(s)) {
          const Tensor<T>& ls = t.value(s);
          Tensor<T>& gs = t.grad(s);
          for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i] * tau * std::exp(ls[i]) * noise[i];
        }
      });
}

template <class T>
Var<T> bernoulli_loglik(Var<T> logits, const Tensor<T>& x) {
  require_same_shape(logits.value(), x, "bernoulli_loglik");
  for (T v : x.values())
    if (v != T(0) && v != T(1)) throw std::invalid_argument("bernoulli_loglik: target is not binary");
  const int l = logits.id;
  const int batch = x.dim(0);
  const std::size_t per = x.size() / static_cast<std::size_t>(batch);
  return logits.tape->record(
      {l},
      [=](Tape<T>& t, int self) {
        const Tensor<T>& lg = t.value(l);
        Tensor<T> out({batch});
        for (int b = 0; b < batch; ++b) {
          double s = 0;
          for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
            const double z = lg[i];
            const double softplus = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
            s += x[i] * z - softplus;
          }
          out[static_cast<std::size_t>(b)] = static_cast<T>(s);
        }
        t.mutable_value(self) = std::move(out);
      },
      [=](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& lg = t.value(l);
        Tensor<T>& gl = t.grad(l);
        for (int b = 0; b < batch; ++b)
          for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
            const double sig = 1.0 / (1.0 + std::exp(-static_cast<double>(lg[i])));
            gl[i] += static_cast<T>(g[static_cast<std::size_t>(b)] * (x[i] - sig));
          }
      });
}

BinGrid pixel_grid(const Shape& item_shape) {
  return {Tensor<double>(item_shape, 1.0 / 255.0), Tensor<double>(item_shape, 1.0)};
}

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kLogSqrt2Pi = 0.91893853320467274178;
constexpr double kMassFloor = 1e-12;

double pdf(double z) { return std::isinf(z) ? 0.0 : std::exp(-0.5 * z * z - kLogSqrt2Pi); }
double z_pdf(double z) { return std::isinf(z) ? 0.0 : z * pdf(z); }
// Upper tail P(Z > z), accurate for large z.
double upper_tail(double z) { return 0.5 * std::erfc(z * kInvSqrt2); }

}  // namespace

BinLogMass log_bin_mass(double x, double mean, double logstd, double halfwidth, double edge) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const double sigma = std::exp(logstd);
  const double lo = x <= -edge + 0.5 * halfwidth ? -inf : x - halfwidth;
  const double hi = x >= edge - 0.5 * halfwidth ? inf : x + halfwidth;
  const double za = (lo - mean) / sigma, zb = (hi - mean) / sigma;
  double mass;
  if (za > 0)
    mass = upper_tail(za) - upper_tail(zb);
  else if (zb < 0)
    mass = upper_tail(-zb) - upper_tail(-za);
  else
    mass = 1.0 - upper_tail(zb) - upper_tail(-za);
  if (mass < kMassFloor) {
    // Density at the bin centre times the bin width.
    const double c = (x - mean) / sigma;
    return {std::log(2 * halfwidth) - logstd - 0.5 * c * c - kLogSqrt2Pi, c / sigma, c * c - 1.0};
  }
  const double dm_dmean = (pdf(za) - pdf(zb)) / sigma;
  const double dm_dlogstd = z_pdf(za) - z_pdf(zb);
  return {std::log(mass), dm_dmean / mass, dm_dlogstd / mass};
}

template <class T>
Var<T> discretized_gaussian_loglik(Var<T> mean, Var<T> logstd, const Tensor<T>& x, const BinGrid& grid) {
  require_same_shape(mean.value(), x, "discretized_gaussian_loglik");
  require_same_shape(logstd.value(), x, "discretized_gaussian_loglik");
  if (grid.halfwidth.shape() != grid.edge.shape() || x.rank() < 1)
    throw std::invalid_argument("discretized_gaussian_loglik: malformed bin grid");
  const int batch = x.dim(0);
  const std::size_t per = x.size() / static_cast<std::size_t>(batch);
  if (grid.halfwidth.size() != per)
    throw std::invalid_argument("discretized_gaussian_loglik: grid shape " + shape_str(grid.halfwidth.shape()) +
                                " does not match items of " + shape_str(x.shape()));
  const int m = mean.id, s = logstd.id;
  auto dmean = std::make_shared<std::vector<double>>();
  auto dlog = std::make_shared<std::vector<double>>();
  return mean.tape->record(
      {m, s},
      [=](Tape<T>& t, int self) {
        const Tensor<T>& mu = t.value(m);
        const Tensor<T>& ls = t.value(s);
        Tensor<T> out({batch});
        dmean->resize(x.size());
        dlog->resize(x.size());
        for (int b = 0; b < batch; ++b) {
          double acc = 0;
          for (std::size_t j = 0; j < per; ++j) {
            const std::size_t i = b * per + j;
            const auto r = log_bin_mass(x[i], mu[i], ls[i], grid.halfwidth[j], grid.edge[j]);
            acc += r.value;
            (*dmean)[i] = r.d_mean;
            (*dlog)[i] = r.d_logstd;
          }
          out[static_cast<std::size_t>(b)] = static_cast<T>(acc);
        }
        t.mutable_value(self) = std::move(out);
      },
      [=](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>* gm = t.needs_grad(m) ? &t.grad(m) : nullptr;
        Tensor<T>* gs = t.needs_grad(s) ? &t.grad(s) : nullptr;
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double gb = g[i / per];
          if (gm) (*gm)[i] += static_cast<T>(gb * (*dmean)[i]);
          if (gs) (*gs)[i] += static_cast<T>(gb * (*dlog)[i]);
        }
      });
}

template <class T>
Var<T> discretized_gaussian_loglik_pixel(Var<T> mean, Var<T> logstd, const Tensor<T>& x) {
  for (T v : x.values()) {
    const double k = (static_cast<double>(v) + 1.0) * 127.5;
    if (!(k >= -1e-3 && k <= 255.001) || std::abs(k - std::round(k)) > 1e-3)
      throw std::invalid_argument("discretized_gaussian_loglik_pixel: value " + std::to_string(v) +
                                  " is not on the 256-level grid");
  }
  Shape item(x.shape().begin() + 1, x.shape().end());
  return discretized_gaussian_loglik(mean, logstd, x, pixel_grid(item));
}

template <class T>
Tensor<T> round_to_grid(const Tensor<T>& values, const BinGrid& grid) {
  const std::size_t per = grid.halfwidth.size();
  if (per == 0 || values.size() % per != 0)
    throw std::invalid_argument("round_to_grid: grid does not tile " + shape_str(values.shape()));
  Tensor<T> out(values.shape());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double step = 2 * grid.halfwidth[i % per], edge = grid.edge[i % per];
    const double levels = std::round(2 * edge / step);
    const double k = std::clamp(std::round((static_cast<double>(values[i]) + edge) / step), 0.0, levels);
    out[i] = static_cast<T>(-edge + k * step);
  }
  return out;
}

#define DCTVAE_INSTANTIATE_LIKELIHOOD(T)                                                              \
  template Tensor<T> gaussian_kl<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Var<T> gaussian_kl<T>(Var<T>, Var<T>, Var<T>, Var<T>);                                     \
  template Var<T> standard_normal_kl<T>(Var<T>, Var<T>);                                              \
  template Tensor<T> reparam_sample<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Var<T> reparam_sample<T>(Var<T>, Var<T>, const Tensor<T>&, T);                             \
  template Var<T> bernoulli_loglik<T>(Var<T>, const Tensor<T>&);                                      \
  template Var<T> discretized_gaussian_loglik<T>(Var<T>, Var<T>, const Tensor<T>&, const BinGrid&);   \
  template Var<T> discretized_gaussian_loglik_pixel<T>(Var<T>, Var<T>, const Tensor<T>&);             \
  template Tensor<T> round_to_grid<T>(const Tensor<T>&, const BinGrid&);

DCTVAE_INSTANTIATE_LIKELIHOOD(float)
DCTVAE_INSTANTIATE_LIKELIHOOD(double)

}  // namespace dctvae
