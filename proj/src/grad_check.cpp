// SPDX-License-Identifier: Apache-2.0

#include "dctvae/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace dctvae {

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& e : entries) w = std::max(w, e.max_rel_error);
  return w;
}

GradCheckReport grad_check(const std::function<Var<double>(Tape<double>&)>& fn,
                           const std::vector<Parameter<double>*>& params, double rel_tol,
                           const GradCheckOptions& options) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    Var<double> out = fn(tape);
    tape.backward(out);
  }
  auto evaluate = [&fn]() {
    Tape<double> tape;
    return fn(tape).value()[0];
  };

  GradCheckReport report;
  report.rel_tol = rel_tol;
  for (auto* p : params) {
    GradCheckEntry entry;
    entry.name = p->name();
    Tensor<double>& v = p->value();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      v[i] = saved + options.step;
      const double up = evaluate();
      v[i] = saved - options.step;
      const double down = evaluate();
      v[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double analytic = p->grad()[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), options.denominator_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel > entry.max_rel_error || i == 0) {
        entry.max_rel_error = std::max(rel, entry.max_rel_error);
        if (rel >= entry.max_rel_error) {
          entry.worst_index = i;
          entry.analytic = analytic;
          entry.numeric = numeric;
        }
      }
    }
    if (entry.max_rel_error > rel_tol) report.failures.push_back(entry.name);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace dctvae
