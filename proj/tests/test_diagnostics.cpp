// SPDX-License-Identifier: Apache-2.0
//
// Per-unit KL, active units, KL CDF and streaming moments.

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "dctvae/diagnostics.hpp"
#include "dctvae/io.hpp"
#include "model_fixtures.hpp"

using namespace dctvae;
using dctvae::testing::random_pixels;
using dctvae::testing::tiny_config;
using dctvae::testing::tiny_model;

namespace {

double two_pass_variance(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double standard_error(const std::vector<double>& v) {
  return std::sqrt(two_pass_variance(v) / static_cast<double>(v.size()));
}

// Posterior means per input, recomputed with the report's noise layout.
std::vector<std::vector<double>> brute_force_means(const JointModel<double>& model, const Tensor<double>& pixels,
                                                   int batch_size, std::uint64_t seed) {
  const ModelConfig& cfg = model.model_config();
  const int n = pixels.dim(0);
  const std::size_t per = pixels.size() / static_cast<std::size_t>(n);
  std::vector<std::vector<double>> out;
  for (int b0 = 0, chunk = 0; b0 < n; b0 += batch_size, ++chunk) {
    const int bn = std::min(batch_size, n - b0);
    Tensor<double> px({bn, pixels.dim(1), pixels.dim(2), pixels.dim(3)});
    std::copy_n(pixels.data() + b0 * per, bn * per, px.data());
    const auto batch = make_batch(model, px);
    Rng rng(derive_seed(seed, 0xd1, static_cast<std::uint64_t>(chunk), 0));
    const auto noise = draw_noise<double>(cfg, bn, rng);
    Tape<double> tape;
    const auto& vae = model.vae();
    const auto feats = vae.bottom_up(tape, tape.constant(vae.encoder_input(batch.target)));
    std::optional<Var<double>> ctx;
    if (model.codec()) ctx = tape.constant(batch.context_image);
    const auto r = vae.top_down(tape, &feats, ctx, {SampleMode::kReconstruction, 0, 1.0}, noise);
    for (int b = 0; b < bn; ++b) {
      std::vector<double> row;
      for (const auto& layer : r.layers) {
        const auto& mu = layer.q_mean->value();
        const std::size_t lu = mu.size() / static_cast<std::size_t>(bn);
        for (std::size_t u = 0; u < lu; ++u) row.push_back(mu[b * lu + u]);
      }
      out.push_back(std::move(row));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("running moments match a two-pass oracle and merge in any order") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> d(3.0, 2.0);
  std::vector<double> xs(1000);
  for (auto& x : xs) x = d(rng);
  RunningMoments all;
  for (double x : xs) all.add(x);
  CHECK(all.count == 1000);
  CHECK(all.mean == doctest::Approx(mean_of(xs)).epsilon(1e-13));
  CHECK(all.variance() == doctest::Approx(two_pass_variance(xs)).epsilon(1e-12));

  std::vector<RunningMoments> shards(7);
  for (std::size_t i = 0; i < xs.size(); ++i) shards[(i * 31) % 7].add(xs[i]);
  for (int perm = 0; perm < 5; ++perm) {
    std::shuffle(shards.begin(), shards.end(), rng);
    RunningMoments merged;
    for (const auto& s : shards) merged.merge(s);
    CHECK(merged.count == 1000);
    CHECK(merged.mean == doctest::Approx(all.mean).epsilon(1e-13));
    CHECK(merged.variance() == doctest::Approx(all.variance()).epsilon(1e-12));
  }
  RunningMoments one;
  one.add(5);
  CHECK(one.variance() == 0);
  RunningMoments empty;
  one.merge(empty);
  CHECK(one.count == 1);
  empty.merge(one);
  CHECK(empty.mean == 5);
}

TEST_CASE("active units from means") {
  std::vector<std::vector<double>> means;
  for (int i = 0; i < 100; ++i) means.push_back({0.0, i % 2 ? 1.0 : -1.0, 0.05 * (i % 2)});
  const auto r = active_units_from_means(means, 0.01);
  CHECK(r.variance[0] == 0.0);
  CHECK(r.variance[1] == doctest::Approx(100.0 / 99.0).epsilon(1e-14));
  CHECK(r.variance[1] > 0.01);
  CHECK(r.variance[2] < 0.01);
  CHECK(r.au == doctest::Approx(1.0 / 3));
  CHECK_THROWS_AS(active_units_from_means({}, 0.01), std::invalid_argument);
  CHECK_THROWS_AS(active_units_from_means({{1.0}, {1.0, 2.0}}, 0.01), std::invalid_argument);
}

TEST_CASE("kl_cdf") {
  const std::vector<double> zeros(10, 0.0);
  const auto grid = default_kl_grid(zeros);
  CHECK(grid.front() == 0.0);
  const auto cdf = kl_cdf(zeros, grid);
  for (double c : cdf) CHECK(c == 1.0);
  const std::vector<double> two{0.0, 1.0}, half{0.5};
  CHECK(kl_cdf(two, half)[0] == 0.5);

  std::mt19937_64 rng(4);
  std::exponential_distribution<double> e(3.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(1 + trial * 37);
    for (auto& x : v) x = trial % 2 ? e(rng) : std::floor(e(rng) * 4) / 4;
    const auto g = default_kl_grid(v);
    const auto c = kl_cdf(v, g);
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const auto count = std::upper_bound(sorted.begin(), sorted.end(), g[i]) - sorted.begin();
      CHECK(c[i] == static_cast<double>(count) / static_cast<double>(v.size()));
      if (i) CHECK(c[i] >= c[i - 1]);
    }
    CHECK(g.back() >= sorted.back());
    CHECK(c.back() == 1.0);
  }
  const auto csv = kl_cdf_csv(std::vector<double>{0, 1}, std::vector<double>{0.25, 1});
  CHECK(csv.rfind("kl_nats,cdf\n", 0) == 0);
}

TEST_CASE("collapse report matches a brute-force recomputation") {
  for (ContextKind ctx : {ContextKind::kNone, ContextKind::kDct}) {
    CAPTURE(context_kind_name(ctx));
    const auto cfg = tiny_config(ctx);
    const auto pixels = random_pixels(cfg, 64, 9);
    const auto model = tiny_model<double>(cfg, pixels, 4);
    DiagnosticsOptions o;
    o.seed = 13;
    o.batch_size = 24;
    o.delta = 1e-4;
    const auto rep = collapse_report(*model, pixels, o);
    const auto means = brute_force_means(*model, pixels, o.batch_size, o.seed);
    REQUIRE(rep.units() == means.front().size());
    CHECK(rep.units() == cfg.model.latent_units());
    CHECK(rep.context_units == cfg.model.context_units());
    std::size_t active = 0;
    for (std::size_t u = 0; u < rep.units(); ++u) {
      std::vector<double> col;
      for (const auto& row : means) col.push_back(row[u]);
      const double var = two_pass_variance(col);
      CHECK(std::abs(rep.mean_variance[u] - var) <= 1e-12 * std::max(1.0, var));
      active += var > o.delta;
      CHECK(rep.per_unit_kl[u] >= -1e-9);
    }
    CHECK(rep.au == static_cast<double>(active) / rep.units());
    const auto au = active_units(*model, pixels, o.delta, 1, o.seed);
    CHECK(au.variance.size() == rep.units());
  }
}

TEST_CASE("a collapsed layer reports zero KL") {
  const auto cfg = tiny_config(ContextKind::kDct);
  const auto pixels = random_pixels(cfg, 16, 2);
  const auto model = tiny_model<double>(cfg, pixels, 5);
  for (auto* p : model->params().all())
    if (p->name().rfind("vae.dec.l1.posterior.expand", 0) == 0) p->value().fill(0.0);
  DiagnosticsOptions o;
  const auto rep = collapse_report(*model, pixels, o);
  const std::size_t first = static_cast<std::size_t>(rep.layer_units[0]);
  double top = 0;
  for (std::size_t u = 0; u < rep.units(); ++u) {
    if (u >= first) CHECK(std::abs(rep.per_unit_kl[u]) < 1e-8);
    else top += rep.per_unit_kl[u];
  }
  CHECK(top > 0);
  CHECK(rep.fraction_below(1e-8) >= static_cast<double>(rep.layer_units[1]) / rep.units());
}

TEST_CASE("per-unit KL agrees with the objective's KL and across sample counts") {
  const auto cfg = tiny_config(ContextKind::kDct);
  const auto pixels = random_pixels(cfg, 200, 6);
  const auto model = tiny_model<double>(cfg, pixels, 6);
  DiagnosticsOptions o;
  o.seed = 1;
  const auto one = collapse_report(*model, pixels, o);
  o.n_mc = 16;
  o.seed = 2;
  const auto many = collapse_report(*model, pixels, o);

  // Objective KL over the same inputs with independent noise.
  const auto batch = make_batch(*model, pixels);
  Rng rng(77);
  const auto noise = draw_objective_noise(*model, 200, false, rng);
  Tape<double> tape;
  const auto obj = joint_objective(tape, *model, batch, noise);

  const double se_obj = standard_error(obj.kl), se1 = standard_error(one.item_kl), se16 = standard_error(many.item_kl);
  CHECK(std::abs(one.total_kl() - mean_of(one.item_kl)) < 1e-9);
  CHECK(std::abs(one.total_kl() - mean_of(obj.kl)) < 3 * std::hypot(se1, se_obj));
  CHECK(std::abs(one.total_kl() - many.total_kl()) < 3 * std::hypot(se1, se16));
  CHECK(one.kl_per_unit() == doctest::Approx(one.total_kl() / one.units()).epsilon(1e-14));
  CHECK(one.au >= 0.0);
  CHECK(one.au <= 1.0);
}

TEST_CASE("report json names its fields") {
  const auto cfg = tiny_config(ContextKind::kNone);
  const auto pixels = random_pixels(cfg, 8, 1);
  const auto model = tiny_model<double>(cfg, pixels, 1);
  DiagnosticsOptions o;
  o.dataset = "probe";
  const auto json = collapse_report(*model, pixels, o).to_json();
  for (const char* key : {"\"active_units\"", "\"delta\"", "\"per_unit_kl\"", "\"context_units\"", "\"probe\""})
    CHECK(json.find(key) != std::string::npos);
  CHECK_THROWS_AS(collapse_report(*model, Tensor<double>(), o), std::invalid_argument);
}
