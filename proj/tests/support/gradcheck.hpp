#pragma once

// Finite-difference oracle for reverse-mode gradients: central differences
// with one Richardson step. Test-only; it perturbs parameter values in place
// and never calls backward on the perturbed evaluations.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "sedkit/diffcore/autodiff.hpp"

namespace sedkit::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
};

/// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps
/// coordinates whose true gradient is ~0 from dividing by round-off.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
  return std::fabs(analytic - numeric) / denom;
}

inline GradCheckResult gradcheck(const std::function<Var()>& loss_fn, std::vector<Var> params,
                                 double eps = 1e-4, double floor = 1e-6) {
  Var loss = loss_fn();
  backward(loss, params);
  std::vector<Tensor> analytic;
  for (auto& p : params) analytic.push_back(p.grad());

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& value = params[i].mutable_value();
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double saved = value[j];
      auto central = [&](double h) {
        value[j] = saved + h;
        const double up = loss_fn().item();
        value[j] = saved - h;
        const double down = loss_fn().item();
        value[j] = saved;
        return (up - down) / (2.0 * h);
      };
      // Richardson extrapolation cancels the h^2 truncation term.
      const double numeric = (4.0 * central(eps / 2.0) - central(eps)) / 3.0;
      result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic[i][j], numeric, floor));
      result.max_abs_error = std::max(result.max_abs_error, std::fabs(analytic[i][j] - numeric));
      ++result.coordinates;
    }
  }
  return result;
}

}  // namespace sedkit::testing
