// SPDX-License-Identifier: Apache-2.0

#include "dctvae/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dctvae/io.hpp"
#include "json.hpp"

namespace dctvae {

void RunningMoments::add(double x) {
  ++count;
  const double d = x - mean;
  mean += d / static_cast<double>(count);
  m2 += d * (x - mean);
}

void RunningMoments::merge(const RunningMoments& o) {
  if (o.count == 0) return;
  if (count == 0) {
    *this = o;
    return;
  }
  const double n = static_cast<double>(count + o.count);
  const double d = o.mean - mean;
  mean += d * static_cast<double>(o.count) / n;
  m2 += o.m2 + d * d * static_cast<double>(count) * static_cast<double>(o.count) / n;
  count += o.count;
}

double RunningMoments::variance() const { return count < 2 ? 0.0 : m2 / static_cast<double>(count - 1); }

double CollapseReport::total_kl() const { return std::accumulate(per_unit_kl.begin(), per_unit_kl.end(), 0.0); }

double CollapseReport::kl_per_unit() const { return per_unit_kl.empty() ? 0.0 : total_kl() / per_unit_kl.size(); }

double CollapseReport::fraction_below(double threshold) const {
  if (per_unit_kl.empty()) return 0.0;
  const auto n = std::count_if(per_unit_kl.begin(), per_unit_kl.end(), [&](double v) { return v < threshold; });
  return static_cast<double>(n) / per_unit_kl.size();
}

std::string CollapseReport::to_json() const {
  nlohmann::ordered_json j;
  j["dataset"] = dataset;
  j["items"] = items;
  j["n_mc"] = n_mc;
  j["delta"] = delta;
  j["latent_units"] = units();
  j["context_units"] = context_units;
  j["layer_units"] = layer_units;
  j["active_units"] = au;
  j["kl_total_nats"] = total_kl();
  j["kl_per_unit_nats"] = kl_per_unit();
  j["per_unit_kl"] = per_unit_kl;
  j["mean_variance"] = mean_variance;
  return j.dump(2) + "\n";
}

template <class T>
CollapseReport collapse_report(const JointModel<T>& model, const Tensor<double>& pixels,
                               const DiagnosticsOptions& options) {
  if (pixels.rank() != 4 || pixels.dim(0) < 1) throw std::invalid_argument("collapse diagnostics: empty test set");
  if (!(options.delta > 0)) throw std::invalid_argument("collapse diagnostics: delta must be positive");
  if (options.n_mc < 1) throw std::invalid_argument("collapse diagnostics: n_mc must be >= 1");
  if (options.batch_size < 1) throw std::invalid_argument("collapse diagnostics: batch_size must be positive");
  const ModelConfig& cfg = model.model_config();
  const int layers = static_cast<int>(cfg.latent_layers.size());

  CollapseReport rep;
  rep.delta = options.delta;
  rep.n_mc = options.n_mc;
  rep.dataset = options.dataset;
  rep.items = pixels.dim(0);
  rep.context_units = cfg.context_units();
  std::vector<std::size_t> offset;
  std::size_t units = 0;
  for (int l = 0; l < layers; ++l) {
    offset.push_back(units);
    rep.layer_units.push_back(static_cast<int>(cfg.layer_units(l)));
    units += cfg.layer_units(l);
  }
  std::vector<double> kl_sum(units, 0.0);
  std::vector<RunningMoments> moments(units);

  const Shape item{cfg.image_channels, cfg.image_side, cfg.image_side};
  const std::size_t per = shape_size(item);
  const int n = pixels.dim(0);
  for (int b0 = 0, chunk = 0; b0 < n; b0 += options.batch_size, ++chunk) {
    const int bn = std::min(options.batch_size, n - b0);
    Tensor<double> px({bn, item[0], item[1], item[2]});
    std::copy_n(pixels.data() + static_cast<std::size_t>(b0) * per, bn * per, px.data());
    const auto batch = make_batch(model, std::move(px));
    std::vector<double> item_kl(units * bn, 0.0), item_mean(units * bn, 0.0);
    for (int s = 0; s < options.n_mc; ++s) {
      Rng rng(derive_seed(options.seed, 0xd1, static_cast<std::uint64_t>(chunk), static_cast<std::uint64_t>(s)));
      const auto noise = draw_noise<T>(cfg, bn, rng);
      Tape<T> tape;
      const auto& vae = model.vae();
      auto x_in = tape.constant(vae.encoder_input(batch.target));
      const auto features = vae.bottom_up(tape, x_in);
      std::optional<Var<T>> ctx;
      if (model.codec()) ctx = tape.constant(batch.context_image);
      const auto r = vae.top_down(tape, &features, ctx, SampleRequest{SampleMode::kReconstruction, 0, 1.0}, noise);
      for (int l = 0; l < layers; ++l) {
        const std::size_t lu = cfg.layer_units(l);
        const Tensor<T>& kl = r.layers[static_cast<std::size_t>(l)].kl->value();
        const Tensor<T>& mu = r.layers[static_cast<std::size_t>(l)].q_mean->value();
        for (int b = 0; b < bn; ++b)
          for (std::size_t u = 0; u < lu; ++u) {
            item_kl[static_cast<std::size_t>(b) * units + offset[l] + u] += kl[b * lu + u];
            item_mean[static_cast<std::size_t>(b) * units + offset[l] + u] += mu[b * lu + u];
          }
      }
    }
    const double inv = 1.0 / options.n_mc;
    for (int b = 0; b < bn; ++b) {
      double total = 0;
      for (std::size_t u = 0; u < units; ++u) {
        const double k = item_kl[static_cast<std::size_t>(b) * units + u] * inv;
        kl_sum[u] += k;
        total += k;
        moments[u].add(item_mean[static_cast<std::size_t>(b) * units + u] * inv);
      }
      rep.item_kl.push_back(total);
    }
  }
  rep.per_unit_kl.resize(units);
  rep.mean_variance.resize(units);
  std::size_t active = 0;
  for (std::size_t u = 0; u < units; ++u) {
    rep.per_unit_kl[u] = kl_sum[u] / n;
    rep.mean_variance[u] = moments[u].variance();
    if (rep.mean_variance[u] > options.delta) ++active;
  }
  rep.au = units ? static_cast<double>(active) / units : 0.0;
  return rep;
}

template <class T>
std::vector<double> per_unit_kl(const JointModel<T>& model, const Tensor<double>& pixels, int n_mc,
                                std::uint64_t seed) {
  DiagnosticsOptions o;
  o.n_mc = n_mc;
  o.seed = seed;
  return collapse_report(model, pixels, o).per_unit_kl;
}

template <class T>
ActiveUnits active_units(const JointModel<T>& model, const Tensor<double>& pixels, double delta, int n_mc,
                         std::uint64_t seed) {
  DiagnosticsOptions o;
  o.delta = delta;
  o.n_mc = n_mc;
  o.seed = seed;
  auto rep = collapse_report(model, pixels, o);
  return {std::move(rep.mean_variance), rep.au};
}

ActiveUnits active_units_from_means(const std::vector<std::vector<double>>& means, double delta) {
  if (means.empty()) throw std::invalid_argument("active_units: empty test set");
  if (!(delta > 0)) throw std::invalid_argument("active_units: delta must be positive");
  const std::size_t units = means.front().size();
  std::vector<RunningMoments> m(units);
  for (const auto& row : means) {
    if (row.size() != units) throw std::invalid_argument("active_units: ragged mean table");
    for (std::size_t u = 0; u < units; ++u) m[u].add(row[u]);
  }
  ActiveUnits out;
  std::size_t active = 0;
  for (const auto& mu : m) {
    out.variance.push_back(mu.variance());
    if (out.variance.back() > delta) ++active;
  }
  out.au = units ? static_cast<double>(active) / units : 0.0;
  return out;
}

std::vector<double> kl_cdf(std::span<const double> values, std::span<const double> grid) {
  if (values.empty()) throw std::invalid_argument("kl_cdf: empty value array");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> out;
  out.reserve(grid.size());
  for (double g : grid) {
    const auto k = std::upper_bound(sorted.begin(), sorted.end(), g) - sorted.begin();
    out.push_back(static_cast<double>(k) / sorted.size());
  }
  return out;
}

std::vector<double> default_kl_grid(std::span<const double> values) {
  const double top = values.empty() ? 1.0 : std::max(1.0, *std::max_element(values.begin(), values.end()));
  std::vector<double> grid{0.0};
  constexpr int kPerDecade = 10;
  for (int i = 0;; ++i) {
    const double g = std::pow(10.0, -5.0 + static_cast<double>(i) / kPerDecade);
    grid.push_back(g);
    if (g >= top) break;
  }
  return grid;
}

std::string kl_cdf_csv(std::span<const double> grid, std::span<const double> cdf) {
  if (grid.size() != cdf.size()) throw std::invalid_argument("kl_cdf_csv: grid and cdf sizes differ");
  std::ostringstream os;
  os.precision(12);
  os << "kl_nats,cdf\n";
  for (std::size_t i = 0; i < grid.size(); ++i) os << grid[i] << ',' << cdf[i] << '\n';
  return os.str();
}

#define DCTVAE_INSTANTIATE_DIAGNOSTICS(T)                                                                    \
  template CollapseReport collapse_report<T>(const JointModel<T>&, const Tensor<double>&,                   \
                                             const DiagnosticsOptions&);                                   \
  template std::vector<double> per_unit_kl<T>(const JointModel<T>&, const Tensor<double>&, int, std::uint64_t); \
  template ActiveUnits active_units<T>(const JointModel<T>&, const Tensor<double>&, double, int, std::uint64_t);

DCTVAE_INSTANTIATE_DIAGNOSTICS(float)
DCTVAE_INSTANTIATE_DIAGNOSTICS(double)

}  // namespace dctvae
