// SPDX-License-Identifier: Apache-2.0
//
// Gaussian KL, reparameterization, likelihood heads and the top-down model.

#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "dctvae/hvae.hpp"
#include "dctvae/joint.hpp"
#include "dctvae/likelihood.hpp"
#include "dctvae/ops.hpp"
#include "model_fixtures.hpp"
#include "test_util.hpp"

using namespace dctvae;
using dctvae::testing::max_abs_diff;
using dctvae::testing::random_pixels;
using dctvae::testing::tiny_config;
using dctvae::testing::tiny_model;

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

// Composite Simpson rule for the N(m, s) density over [a, b].
double simpson_mass(double a, double b, double m, double s, int intervals = 2000) {
  const double h = (b - a) / intervals;
  auto f = [&](double u) { return std::exp(-0.5 * (u - m) * (u - m) / (s * s)) / (s * std::sqrt(2 * std::numbers::pi)); };
  double acc = f(a) + f(b);
  for (int i = 1; i < intervals; ++i) acc += (i % 2 ? 4 : 2) * f(a + i * h);
  return acc * h / 3;
}

template <class T>
Tensor<T> run_bernoulli(const Tensor<T>& logits, const Tensor<T>& x) {
  Tape<T> tape;
  return bernoulli_loglik(tape.constant(logits), x).value();
}

void zero_posterior_heads(ParameterStore<double>& store) {
  for (auto* p : store.all())
    if (p->name().find(".posterior.expand") != std::string::npos) p->value().fill(0.0);
}

}  // namespace

TEST_CASE("gaussian_kl closed form") {
  CHECK(gaussian_kl(0.3, -0.2, 0.3, -0.2) == 0.0);
  CHECK(gaussian_kl(1.0, 0.0, 0.0, 0.0) == doctest::Approx(0.5).epsilon(1e-15));
  const double kl = gaussian_kl(0.0, std::log(2.0), 0.0, 0.0);
  CHECK(kl == doctest::Approx(0.80685).epsilon(1e-5));

  // Monte Carlo estimate of E_q[log q - log p].
  std::mt19937_64 rng(42);
  std::normal_distribution<double> n01;
  const int n = 1000000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const double z = 2.0 * n01(rng);
    const double v = (-std::log(2.0) - 0.5 * z * z / 4) - (-0.5 * z * z);
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n, se = std::sqrt((sq / n - mean * mean) / n);
  CHECK(std::abs(mean - kl) < 3 * se);
}

TEST_CASE("gaussian_kl is nonnegative on random parameters") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-3, 3), ls(kLogstdMin, kLogstdMax);
  for (int i = 0; i < 10000; ++i) CHECK(gaussian_kl(u(rng), ls(rng), u(rng), ls(rng)) >= -1e-9);
}

TEST_CASE("reparam_sample") {
  const Tensor<double> mean({3}, std::vector<double>{0.5, -1, 2});
  const Tensor<double> logstd({3}, std::vector<double>{0.1, -0.3, 1});
  const Tensor<double> zero({3});
  const Tensor<double> noise({3}, std::vector<double>{1.3, -0.7, 2.2});
  CHECK(max_abs_diff(reparam_sample(mean, logstd, zero, 1.0), mean) == 0);
  CHECK(max_abs_diff(reparam_sample(mean, logstd, noise, 0.0), mean) == 0);

  const int n = 100000;
  const double tau = 0.7, ls = 0.4;
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n01;
  Tensor<double> m({n}), l({n}, ls), e({n});
  for (auto& v : e.values()) v = n01(rng);
  const auto z = reparam_sample(m, l, e, tau);
  double s1 = 0, s2 = 0;
  for (double v : z.values()) {
    s1 += v;
    s2 += v * v;
  }
  const double var = s2 / n - (s1 / n) * (s1 / n);
  const double expect = tau * tau * std::exp(2 * ls);
  // SE of the sample variance of a Gaussian: sigma^2 sqrt(2 / (n - 1)).
  CHECK(std::abs(var - expect) < 3 * expect * std::sqrt(2.0 / (n - 1)));
}

TEST_CASE("bernoulli_loglik") {
  Tensor<double> img({1, 1, 28, 28});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = i % 3 == 0;
  CHECK(run_bernoulli(Tensor<double>({1, 1, 28, 28}), img)[0] == doctest::Approx(-784 * std::log(2.0)).epsilon(1e-14));

  Tensor<double> ones({1, 4}, 1.0), big({1, 4}, 60.0);
  const double sat = run_bernoulli(big, ones)[0];
  CHECK(sat <= 0);
  CHECK(sat > -1e-20);

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-8, 8);
  Tensor<double> logits({3, 1, 5, 5}), tgt({3, 1, 5, 5});
  for (std::size_t i = 0; i < logits.size(); ++i) {
    logits[i] = u(rng);
    tgt[i] = u(rng) > 0;
  }
  const auto got = run_bernoulli(logits, tgt);
  for (int b = 0; b < 3; ++b) {
    double direct = 0;
    for (int i = 0; i < 25; ++i) {
      const double l = logits[b * 25 + i], p = 1 / (1 + std::exp(-l));
      direct += tgt[b * 25 + i] ? std::log(p) : std::log(1 - p);
    }
    CHECK(std::abs(got[b] - direct) < 1e-10);
  }
  CHECK_THROWS_AS(run_bernoulli(logits, Tensor<double>({3, 1, 5, 5}, 0.5)), std::invalid_argument);
}

TEST_CASE("discretized Gaussian bin masses") {
  const double h = 1.0 / 255;
  SUBCASE("masses over the 256-level grid sum to one") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> um(-1.5, 1.5), ul(-6, 1);
    for (int trial = 0; trial < 100; ++trial) {
      const double m = um(rng), ls = ul(rng);
      double total = 0;
      for (int k = 0; k < 256; ++k) total += std::exp(log_bin_mass(-1 + 2.0 * k / 255, m, ls, h, 1).value);
      CHECK(std::abs(total - 1) < 1e-6);
    }
  }
  SUBCASE("edge bins own the open tails") {
    const double s = 0.3;
    CHECK(std::exp(log_bin_mass(1, 1, std::log(s), h, 1).value) ==
          doctest::Approx(1 - normal_cdf((1 - h - 1) / s)).epsilon(1e-12));
    CHECK(std::exp(log_bin_mass(-1, 0.2, std::log(s), h, 1).value) ==
          doctest::Approx(normal_cdf((-1 + h - 0.2) / s)).epsilon(1e-12));
  }
  SUBCASE("interior bins match quadrature") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> um(-1, 1), ul(-4, 0);
    std::uniform_int_distribution<int> uk(1, 254);
    for (int trial = 0; trial < 50; ++trial) {
      const double x = -1 + 2.0 * uk(rng) / 255, m = um(rng), ls = ul(rng);
      const double oracle = simpson_mass(x - h, x + h, m, std::exp(ls));
      CHECK(std::abs(std::exp(log_bin_mass(x, m, ls, h, 1).value) - oracle) < 1e-8);
    }
  }
  SUBCASE("arbitrary bin widths stay normalized") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> um(-1.2, 1.2), ul(-5, 0.5);
    for (int levels : {2, 3, 9, 64}) {
      const double hw = 1.0 / (levels - 1);
      for (int trial = 0; trial < 20; ++trial) {
        const double m = um(rng), ls = ul(rng);
        double total = 0;
        for (int k = 0; k < levels; ++k) total += std::exp(log_bin_mass(-1 + 2 * hw * k, m, ls, hw, 1).value);
        CHECK(std::abs(total - 1) < 1e-6);
      }
    }
  }
}

TEST_CASE("discretized Gaussian pixel head rejects off-grid targets") {
  Tape<double> tape;
  auto m = tape.constant(Tensor<double>({1, 1, 2, 2}));
  auto s = tape.constant(Tensor<double>({1, 1, 2, 2}, -1.0));
  Tensor<double> x({1, 1, 2, 2}, 0.5);
  CHECK_THROWS_AS(discretized_gaussian_loglik_pixel(m, s, x), std::invalid_argument);
  x.fill(-1 + 2.0 * 128 / 255);
  CHECK(std::isfinite(discretized_gaussian_loglik_pixel(m, s, x).value()[0]));
}

TEST_CASE("bottom_up with zero input and identity blocks propagates biases") {
  const auto cfg = tiny_config(ContextKind::kNone);
  ParameterStore<double> store;
  Rng rng(1);
  Hvae<double> vae(cfg.model, store, rng);
  for (auto* p : store.all())
    if (p->name().find(".enc0.expand") != std::string::npos) p->value().fill(0.0);
  const auto* sb = store.find("vae.enc.stem.bias");
  const auto* pw = store.find("vae.enc.proj.weight");
  const auto* pb = store.find("vae.enc.proj.bias");
  REQUIRE(sb);
  REQUIRE(pw);
  REQUIRE(pb);
  Tape<double> tape;
  const auto feats = vae.bottom_up(tape, tape.constant(Tensor<double>({2, 1, 8, 8})));
  const int hid = cfg.model.hidden_width, in = cfg.model.input_width;
  for (const auto& f : feats)
    for (int b = 0; b < f.dim(0); ++b)
      for (int c = 0; c < hid; ++c) {
        double expect = pb->value()[c];
        for (int k = 0; k < in; ++k) {
          const double s = sb->value()[k];
          expect += pw->value()[c * in + k] * s / (1 + std::exp(-s));
        }
        for (int y = 0; y < f.dim(2); ++y)
          for (int x = 0; x < f.dim(3); ++x) CHECK(f.value().at(b, c, y, x) == doctest::Approx(expect).epsilon(1e-12));
      }
}

TEST_CASE("bottom_up is batch independent and reproducible") {
  const auto cfg = tiny_config(ContextKind::kDct);
  auto run = [&](const Tensor<double>& x) {
    ParameterStore<double> store;
    Rng rng(77);
    Hvae<double> vae(cfg.model, store, rng);
    Tape<double> tape;
    std::vector<Tensor<double>> out;
    for (const auto& f : vae.bottom_up(tape, tape.constant(vae.encoder_input(x)))) out.push_back(f.value());
    return out;
  };
  const auto x = random_pixels(cfg, 3, 2);
  Tensor<double> xx({6, 1, 8, 8});
  std::copy_n(x.data(), x.size(), xx.data());
  std::copy_n(x.data(), x.size(), xx.data() + x.size());
  const auto a = run(x), b = run(xx), c = run(x);
  for (std::size_t s = 0; s < a.size(); ++s) {
    const std::size_t half = a[s].size();
    for (std::size_t i = 0; i < half; ++i) {
      CHECK(b[s][i] == a[s][i]);
      CHECK(b[s][half + i] == a[s][i]);
    }
    CHECK(a[s].values().size() == c[s].values().size());
    CHECK(std::equal(a[s].values().begin(), a[s].values().end(), c[s].values().begin()));
  }
}

TEST_CASE("sampling modes at their definition boundaries") {
  for (ContextKind ctx : {ContextKind::kNone, ContextKind::kDct}) {
    CAPTURE(context_kind_name(ctx));
    const auto cfg = tiny_config(ctx);
    const auto pixels = random_pixels(cfg, 4, 11);
    const auto model = tiny_model<double>(cfg, pixels, 5);
    const auto batch = make_batch(*model, pixels);
    const auto& vae = model->vae();
    Rng rng(3);
    const auto noise = draw_noise<double>(cfg.model, 4, rng);
    auto mean_for = [&](const SampleRequest& req) {
      Tape<double> tape;
      const auto feats = vae.bottom_up(tape, tape.constant(vae.encoder_input(batch.target)));
      std::optional<Var<double>> c;
      if (cfg.model.has_context()) c = tape.constant(batch.context_image);
      return vae.mean_image(vae.top_down(tape, &feats, c, req, noise));
    };
    const int slots = cfg.model.slots();
    const auto rec = mean_for({SampleMode::kReconstruction, 0, 1.0});
    CHECK(max_abs_diff(rec, mean_for({SampleMode::kPartial, slots, 1.0})) == 0);
    CHECK(max_abs_diff(rec, mean_for({SampleMode::kReconstruction, 0, 1.0})) == 0);
    if (!cfg.model.has_context())
      CHECK(max_abs_diff(mean_for({SampleMode::kUnconditional, 0, 1.0}), mean_for({SampleMode::kPartial, 0, 1.0})) == 0);
    CHECK_THROWS_AS(mean_for({SampleMode::kPartial, slots + 1, 1.0}), std::invalid_argument);
  }
}

TEST_CASE("partial(1) with a context reads nothing else from the input") {
  const auto cfg = tiny_config(ContextKind::kDct);
  const auto pixels = random_pixels(cfg, 4, 21);
  const auto model = tiny_model<double>(cfg, pixels, 6);
  const auto batch = make_batch(*model, pixels);
  const auto& vae = model->vae();
  Rng rng(8);
  const auto noise = draw_noise<double>(cfg.model, 4, rng);
  const SampleRequest req{SampleMode::kPartial, 1, 1.0};

  Tape<double> t1;
  const auto feats = vae.bottom_up(t1, t1.constant(vae.encoder_input(batch.target)));
  const auto with = vae.top_down(t1, &feats, t1.constant(batch.context_image), req, noise);
  // Features of a different input change nothing.
  Tape<double> t2;
  const auto other = vae.bottom_up(t2, t2.constant(vae.encoder_input(Tensor<double>(batch.target.shape()))));
  const auto swapped = vae.top_down(t2, &other, t2.constant(batch.context_image), req, noise);
  Tape<double> t3;
  const auto without = vae.top_down(t3, nullptr, t3.constant(batch.context_image), req, noise);
  CHECK(max_abs_diff(vae.mean_image(with), vae.mean_image(swapped)) == 0);
  CHECK(max_abs_diff(vae.mean_image(with), vae.mean_image(without)) == 0);
  for (const auto& l : without.layers) CHECK_FALSE(l.from_posterior);
}

TEST_CASE("per-unit KL sums to the objective's KL term") {
  for (ContextKind ctx : {ContextKind::kNone, ContextKind::kDct, ContextKind::kDownsample}) {
    CAPTURE(context_kind_name(ctx));
    const auto cfg = tiny_config(ctx);
    const auto pixels = random_pixels(cfg, 5, 31);
    const auto model = tiny_model<double>(cfg, pixels, 7);
    const auto batch = make_batch(*model, pixels);
    Rng rng(4);
    const auto noise = draw_objective_noise(*model, 5, false, rng);
    Tape<double> tape;
    const auto obj = joint_objective(tape, *model, batch, noise);
    std::vector<double> sums(5, 0.0);
    for (const auto& l : obj.hierarchy.layers) {
      const auto& kl = l.kl->value();
      const std::size_t per = kl.size() / 5;
      for (std::size_t i = 0; i < kl.size(); ++i) {
        CHECK(kl[i] >= -1e-9);
        sums[i / per] += kl[i];
      }
    }
    for (int b = 0; b < 5; ++b) {
      CHECK(std::abs(sums[static_cast<std::size_t>(b)] - obj.kl[static_cast<std::size_t>(b)]) < 1e-6);
      CHECK(std::abs(obj.recon[static_cast<std::size_t>(b)] + obj.kl[static_cast<std::size_t>(b)] +
                     obj.diffusion[static_cast<std::size_t>(b)] - obj.total[static_cast<std::size_t>(b)]) < 1e-6);
    }
    double mean = 0;
    for (double v : obj.total) mean += v / 5;
    CHECK(obj.loss.value()[0] == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("q equal to p leaves only the reconstruction term") {
  auto cfg = tiny_config(ContextKind::kNone);
  cfg.model.latent_layers = {4};
  const auto pixels = random_pixels(cfg, 3, 41);
  const auto model = tiny_model<double>(cfg, pixels, 8);
  zero_posterior_heads(model->params());
  const auto batch = make_batch(*model, pixels);
  Rng rng(2);
  const auto noise = draw_objective_noise(*model, 3, false, rng);
  Tape<double> tape;
  const auto obj = joint_objective(tape, *model, batch, noise);
  for (std::size_t b = 0; b < 3; ++b) {
    CHECK(std::abs(obj.kl[b]) < 1e-12);
    CHECK(std::abs(obj.diffusion[b]) < 1e-12);
    CHECK(obj.total[b] == doctest::Approx(obj.recon[b]).epsilon(1e-14));
  }
}

TEST_CASE("every mode is bit-deterministic under a fixed noise bank") {
  const auto cfg = tiny_config(ContextKind::kDct, Likelihood::kDiscretizedGaussian, 3);
  const auto pixels = random_pixels(cfg, 2, 51);
  auto run = [&](SampleMode mode, int m) {
    const auto model = tiny_model<float>(cfg, pixels, 9);
    const auto batch = make_batch(*model, pixels);
    Rng rng(5);
    const auto noise = draw_noise<float>(cfg.model, 2, rng);
    Tape<float> tape;
    const auto& vae = model->vae();
    const auto feats = vae.bottom_up(tape, tape.constant(vae.encoder_input(batch.target)));
    return vae.mean_image(vae.top_down(tape, &feats, tape.constant(batch.context_image), {mode, m, 0.8}, noise));
  };
  for (auto [mode, m] : {std::pair{SampleMode::kReconstruction, 0}, std::pair{SampleMode::kPartial, 1},
                         std::pair{SampleMode::kPartial, 2}}) {
    const auto a = run(mode, m), b = run(mode, m);
    CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
    for (float v : a.values()) {
      CHECK(v >= -1.0f);
      CHECK(v <= 1.0f);
    }
  }
}
