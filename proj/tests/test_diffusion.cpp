// SPDX-License-Identifier: Apache-2.0
//
// Noise schedule algebra, the variational bound and ancestral sampling.

#include <cmath>
#include <random>

#include "doctest.h"
#include "dctvae/diffusion.hpp"
#include "dctvae/ops.hpp"
#include "dctvae/trainer.hpp"
#include "test_util.hpp"

using namespace dctvae;
using dctvae::testing::random_tensor;

namespace {

BinGrid uniform_grid(const Shape& item, double halfwidth) {
  return BinGrid{Tensor<double>(item, halfwidth), Tensor<double>(item, 1.0)};
}

DiffusionConfig small_prior(int steps) {
  DiffusionConfig c;
  c.steps = steps;
  c.width = 16;
  c.blocks = 2;
  return c;
}

// Points on a grid of half width h, [B, 1, 1, 1].
Tensor<double> point_batch(const std::vector<double>& pts, int n, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, pts.size() - 1);
  Tensor<double> y({n, 1, 1, 1});
  for (auto& v : y.values()) v = pts[pick(rng)];
  return y;
}

// Full-sum bound on `y0` with a fixed noise draw.
double mean_bound(const Denoiser<double>& d, const Tensor<double>& y0, const BinGrid& grid, const NoiseSchedule& s,
                  std::uint64_t seed) {
  Rng rng(seed);
  const auto noise = draw_vlb_noise<double>(y0.shape(), s.steps, rng);
  Tape<double> tape;
  const auto r = vlb_loss(tape, d, y0, grid, s, noise);
  double m = 0;
  for (double v : r.total.value().values()) m += v / y0.dim(0);
  return m;
}

void train_prior(Denoiser<double>& d, ParameterStore<double>& store, const std::vector<double>& pts,
                 const BinGrid& grid, const NoiseSchedule& s, int steps, std::uint64_t seed,
                 const std::function<void(int)>& every_100 = {}) {
  TrainConfig tc;
  tc.weight_decay = 0;
  AdamW<double> opt(tc, store);
  std::mt19937_64 data_rng(seed);
  Rng noise_rng(seed + 1);
  for (int step = 0; step < steps; ++step) {
    const auto y0 = point_batch(pts, 64, data_rng);
    const auto noise = draw_vlb_noise<double>(y0.shape(), s.steps, noise_rng);
    store.zero_grad();
    Tape<double> tape;
    const auto r = vlb_loss(tape, d, y0, grid, s, noise, sample_steps(64, s.steps, noise_rng));
    tape.backward(mean(r.total));
    opt.apply(cosine_lr(step, steps, 3e-3, 3e-4));
    if (every_100 && (step + 1) % 100 == 0) every_100(step + 1);
  }
}

}  // namespace

TEST_CASE("two-step schedule values") {
  const auto s = build_schedule(2, 0.1, 0.2);
  CHECK(s.alpha_bar_at(1) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(s.alpha_bar_at(2) == doctest::Approx(0.72).epsilon(1e-15));
  CHECK(std::abs(s.beta_tilde_at(2) - 0.1 / 0.28 * 0.2) < 1e-15);
  CHECK(s.beta_tilde_at(2) == doctest::Approx(0.0714286).epsilon(1e-6));
  CHECK(s.beta_tilde_at(1) == 0.0);
  CHECK(s.final_variance() == 0.1);
  const auto one = build_schedule(1, 0.3, 0.3);
  CHECK(one.alpha_bar_at(1) == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("schedules are finite, in (0,1) and decreasing") {
  for (int steps : {1, 2, 7, 20, 100, 1000}) {
    DiffusionConfig c;
    c.steps = steps;
    const auto s = build_schedule(steps, c.start(), c.end());
    CAPTURE(steps);
    for (int t = 1; t <= steps; ++t) {
      for (double v : {s.beta_at(t), s.alpha_at(t), s.alpha_bar_at(t)}) {
        CHECK(std::isfinite(v));
        CHECK(v > 0);
        CHECK(v < 1);
      }
      if (t > 1) {
        CHECK(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
        CHECK(s.beta_tilde_at(t) > 0);
        CHECK(s.beta_tilde_at(t) < s.beta_at(t));
      }
    }
  }
  CHECK_THROWS_AS(build_schedule(std::vector<double>{0.2, 0.1}), std::invalid_argument);
  CHECK_THROWS_AS(build_schedule(std::vector<double>{0.1, 1.0}), std::invalid_argument);
}

TEST_CASE("default endpoints rescale the 1000-step schedule") {
  DiffusionConfig c;
  c.steps = 100;
  CHECK(c.start() == doctest::Approx(1e-3));
  CHECK(c.end() == doctest::Approx(0.2));
  c.steps = 1000;
  CHECK(c.start() == doctest::Approx(1e-4));
  CHECK(c.end() == doctest::Approx(0.02));
  c.steps = 7;
  CHECK(c.end() == DiffusionConfig::kMaxDefaultBeta);
  c.beta_end = 0.3;
  CHECK(c.end() == 0.3);
}

TEST_CASE("forward_marginal") {
  const auto s = build_schedule(2, 0.1, 0.2);
  const auto y0 = random_tensor<double>({3, 1, 2, 2}, 1);
  const auto y = forward_marginal(y0, 2, Tensor<double>(y0.shape()), s);
  for (std::size_t i = 0; i < y0.size(); ++i) CHECK(y[i] == doctest::Approx(std::sqrt(0.72) * y0[i]).epsilon(1e-15));

  const auto hot = build_schedule(std::vector<double>{0.5, 0.999999});
  const auto noise = random_tensor<double>(y0.shape(), 2);
  const auto yt = forward_marginal(y0, 2, noise, hot);
  for (std::size_t i = 0; i < y0.size(); ++i) CHECK(std::abs(yt[i] - noise[i]) < 2e-3);

  const int n = 100000;
  Tensor<double> many({n}, 0.6), eps({n});
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n01;
  for (auto& v : eps.values()) v = n01(rng);
  const auto draws = forward_marginal(many, 2, eps, s);
  double s1 = 0, s2 = 0;
  for (double v : draws.values()) {
    s1 += v;
    s2 += v * v;
  }
  const double mean = s1 / n, var = s2 / n - mean * mean;
  CHECK(std::abs(mean - std::sqrt(0.72) * 0.6) < 3 * std::sqrt(0.28 / n));
  CHECK(std::abs(var - 0.28) < 3 * 0.28 * std::sqrt(2.0 / (n - 1)));
}

TEST_CASE("posterior_params") {
  const auto s = build_schedule(2, 0.1, 0.2);
  const Tensor<double> one({1}, 1.0), zero({1});
  const auto p = posterior_params(one, one, 2, s);
  CHECK(p.mean[0] == doctest::Approx(0.99707).epsilon(1e-5));
  const double c0 = std::sqrt(0.9) * 0.2 / 0.28, ct = std::sqrt(0.8) * 0.1 / 0.28;
  CHECK(std::abs(p.mean[0] - (c0 + ct)) < 1e-15);
  CHECK(p.variance == doctest::Approx(0.0714286).epsilon(1e-6));
  CHECK(posterior_params(zero, zero, 2, s).mean[0] == 0.0);
  CHECK_THROWS_AS(posterior_params(one, one, 1, s), std::invalid_argument);
}

TEST_CASE("terminal KL matches Monte Carlo") {
  const auto s = build_schedule(3, 0.1, 0.3);
  const Tensor<double> y0({1, 1, 1, 2}, std::vector<double>{0.7, -0.4});
  const double closed = terminal_kl(y0, s)[0];
  const double ab = s.alpha_bar.back(), sd = std::sqrt(1 - ab);
  std::mt19937_64 rng(10);
  std::normal_distribution<double> n01;
  const int n = 200000;
  double s1 = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    double v = 0;
    for (double y : {0.7, -0.4}) {
      const double e = n01(rng), z = std::sqrt(ab) * y + sd * e;
      v += (-std::log(sd) - 0.5 * e * e) - (-0.5 * z * z);
    }
    s1 += v;
    s2 += v * v;
  }
  const double mean = s1 / n, se = std::sqrt((s2 / n - mean * mean) / n);
  CHECK(std::abs(mean - closed) < 3 * se);
}

TEST_CASE("vlb bookkeeping") {
  const Shape item{1, 2, 2};
  const auto grid = uniform_grid(item, 0.1);
  ParameterStore<double> store;
  Rng init(4);
  SUBCASE("one step reduces to L0 plus LT") {
    Denoiser<double> d(small_prior(1), 1, store, init);
    const auto s = build_schedule(1, 0.2, 0.2);
    const auto y0 = round_to_grid(random_tensor<double>({3, 1, 2, 2}, 3), grid);
    Rng rng(1);
    const auto noise = draw_vlb_noise<double>(y0.shape(), 1, rng);
    Tape<double> tape;
    const auto r = vlb_loss(tape, d, y0, grid, s, noise);
    for (std::size_t b = 0; b < 3; ++b) {
      CHECK(r.middle[b] == 0.0);
      CHECK(r.total.value()[b] == doctest::Approx(r.l0[b] + r.terminal[b]).epsilon(1e-14));
    }
  }
  SUBCASE("full sum equals the mean of the sampled estimator over every t") {
    const int steps = 5;
    Denoiser<double> d(small_prior(steps), 1, store, init);
    const auto s = build_schedule(steps, 0.05, 0.4);
    const auto y0 = round_to_grid(random_tensor<double>({4, 1, 2, 2}, 5), grid);
    Rng rng(2);
    const auto noise = draw_vlb_noise<double>(y0.shape(), steps, rng);
    Tape<double> tape;
    const auto full = vlb_loss(tape, d, y0, grid, s, noise);
    std::vector<double> avg(4, 0.0);
    for (int t = 2; t <= steps; ++t) {
      const auto r = vlb_loss(tape, d, y0, grid, s, noise, std::vector<int>(4, t));
      for (std::size_t b = 0; b < 4; ++b) avg[b] += r.total.value()[b] / (steps - 1);
    }
    for (std::size_t b = 0; b < 4; ++b) CHECK(std::abs(avg[b] - full.total.value()[b]) < 1e-10);
    const auto draw = sample_steps(1000, steps, rng);
    for (int t : draw) {
      CHECK(t >= 2);
      CHECK(t <= steps);
    }
    CHECK(sample_steps(3, 1, rng).empty());
  }
}

TEST_CASE("ancestral samples lie on the grid") {
  const Shape item{2, 3, 3};
  Tensor<double> hw(item), edge(item, 1.0);
  for (std::size_t i = 0; i < hw.size(); ++i) hw[i] = 1.0 / (2 + i % 5);
  const BinGrid grid{hw, edge};
  ParameterStore<double> store;
  Rng init(1);
  Denoiser<double> d(small_prior(1), 2, store, init);
  for (auto* p : store.all()) p->value().fill(0.0);
  const auto s = build_schedule(1, 0.3, 0.3);
  Rng rng(7);
  const auto y = ancestral_sample(d, s, grid, item, 50, rng);
  CHECK(y.shape() == Shape{50, 2, 3, 3});
  const auto again = round_to_grid(y, grid);
  for (std::size_t i = 0; i < y.size(); ++i) {
    CHECK(y[i] >= -1.0);
    CHECK(y[i] <= 1.0);
    CHECK(y[i] == again[i]);
  }
}

TEST_CASE("a trained prior concentrates on a two-point dataset") {
  const Shape item{1, 1, 1};
  const auto grid = uniform_grid(item, 0.05);
  const auto s = build_schedule(100, 1e-3, 0.1);
  ParameterStore<double> store;
  Rng init(3);
  Denoiser<double> d(small_prior(100), 1, store, init);
  train_prior(d, store, {-0.5, 0.5}, grid, s, 4000, 11);
  Rng rng(12);
  const auto y = ancestral_sample(d, s, grid, item, 1000, rng);
  int near = 0;
  for (double v : y.values()) near += std::min(std::abs(v - 0.5), std::abs(v + 0.5)) <= 0.1 + 1e-9;
  CHECK(near >= 900);
}

TEST_CASE("the bound on a one-point dataset is nonnegative and shrinks with training") {
  const Shape item{1, 1, 1};
  const auto grid = uniform_grid(item, 0.05);
  const auto s = build_schedule(4, 0.01, 0.5);
  ParameterStore<double> store;
  Rng init(5);
  Denoiser<double> d(small_prior(4), 1, store, init);
  const Tensor<double> probe({256, 1, 1, 1}, 0.3);
  std::vector<double> bits{mean_bound(d, probe, grid, s, 99) / std::log(2.0)};
  train_prior(d, store, {0.3}, grid, s, 600, 21, [&](int) { bits.push_back(mean_bound(d, probe, grid, s, 99) / std::log(2.0)); });
  for (std::size_t i = 0; i < bits.size(); ++i) {
    CAPTURE(i);
    CHECK(bits[i] >= 0.0);
    if (i) CHECK(bits[i] <= 1.05 * bits[i - 1]);
  }
  CHECK(bits.back() < bits.front());
}
