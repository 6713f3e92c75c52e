// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dctvae/autodiff.hpp"

namespace dctvae {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  std::vector<std::string> failures;  // parameter paths above tolerance
  double rel_tol = 0.0;
  bool passed() const { return failures.empty(); }
  double worst() const;
};

struct GradCheckOptions {
  double step = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, denominator_floor).
  double denominator_floor = 1e-4;
};

// Compares reverse-mode gradients of a scalar function against central finite
// differences. `fn` must be deterministic: it is re-evaluated on a fresh tape
// for every perturbed coordinate.
GradCheckReport grad_check(const std::function<Var<double>(Tape<double>&)>& fn,
                           const std::vector<Parameter<double>*>& params, double rel_tol,
                           const GradCheckOptions& options = {});

}  // namespace dctvae
