// SPDX-License-Identifier: Apache-2.0
//
// Posterior-collapse diagnostics: per-unit KL, active units and the KL CDF.
// Units are ordered layer by layer from the top, each layer in
// [channel, row, column] order. The context slot carries no KL and is only
// counted in `context_units`.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dctvae/joint.hpp"

namespace dctvae {

// Streaming mean and unbiased variance; shards merge in any order.
struct RunningMoments {
  std::int64_t count = 0;
  double mean = 0, m2 = 0;

  void add(double x);
  void merge(const RunningMoments& other);
  // n - 1 denominator; 0 below two samples.
  double variance() const;
};

struct CollapseReport {
  std::vector<double> per_unit_kl;
  std::vector<double> mean_variance;  // variance over inputs of the posterior mean
  std::vector<int> layer_units;
  std::size_t context_units = 0;
  double delta = 0.01;
  double au = 0;  // fraction of units with mean_variance > delta
  int n_mc = 1;
  int items = 0;
  std::string dataset;
  std::vector<double> item_kl;  // total KL per input, averaged over samples

  std::size_t units() const { return per_unit_kl.size(); }
  // Total KL per input divided by the number of units.
  double kl_per_unit() const;
  double total_kl() const;
  // Fraction of units whose KL is below `threshold`.
  double fraction_below(double threshold) const;
  std::string to_json() const;
};

struct DiagnosticsOptions {
  double delta = 0.01;
  int n_mc = 1;
  int batch_size = 100;
  std::uint64_t seed = 0;
  std::string dataset;
};

// Both metrics from one pass. For each input, n_mc posterior chains are
// drawn; per-unit KLs and posterior means are averaged over the chains.
template <class T>
CollapseReport collapse_report(const JointModel<T>& model, const Tensor<double>& pixels,
                               const DiagnosticsOptions& options);

template <class T>
std::vector<double> per_unit_kl(const JointModel<T>& model, const Tensor<double>& pixels, int n_mc,
                                std::uint64_t seed);

struct ActiveUnits {
  std::vector<double> variance;
  double au = 0;
};

template <class T>
ActiveUnits active_units(const JointModel<T>& model, const Tensor<double>& pixels, double delta, int n_mc,
                         std::uint64_t seed);

// Active-unit fraction from per-input means, [items][units].
ActiveUnits active_units_from_means(const std::vector<std::vector<double>>& means, double delta);

// Empirical CDF of `values` at each grid point: #{v <= g} / n.
std::vector<double> kl_cdf(std::span<const double> values, std::span<const double> grid);
// 0, then log-spaced points from 1e-5 up to at least max(values).
std::vector<double> default_kl_grid(std::span<const double> values);
std::string kl_cdf_csv(std::span<const double> grid, std::span<const double> cdf);

}  // namespace dctvae
