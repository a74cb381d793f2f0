#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sedkit/diagnostics.hpp"
#include "sedkit/diffcore/tensor.hpp"

namespace sedkit {

/// A correlation is undefined for the given inputs (constant list, too few
/// points). Carries the offending task name when raised by the harness.
class CorrelationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Cosine similarity; a zero-norm operand yields 0 and a zero_norm warning.
inline double cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw ShapeError("cosine: dimension mismatch " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
  }
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) {
    Diagnostics::instance().warn(warning::kZeroNorm, "cosine with a zero-norm vector scored as 0");
    return 0.0;
  }
  const double c = dot / (std::sqrt(nu) * std::sqrt(nv));
  return std::clamp(c, -1.0, 1.0);
}

namespace correlation_detail {

inline void check_inputs(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw CorrelationError("correlation: lists differ in length");
  if (xs.size() < 2) throw CorrelationError("correlation: need at least two points");
}

}  // namespace correlation_detail

/// Sample Pearson correlation coefficient. A constant list is an error.
inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  correlation_detail::check_inputs(xs, ys);
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw CorrelationError("correlation undefined: constant input list");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// 1-based fractional ranks; tied values share the mean of their positions.
inline std::vector<double> fractional_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

/// Spearman rank correlation: Pearson over fractional ranks.
inline double spearman(std::span<const double> xs, std::span<const double> ys) {
  correlation_detail::check_inputs(xs, ys);
  const auto rx = fractional_ranks(xs);
  const auto ry = fractional_ranks(ys);
  return pearson(rx, ry);
}

}  // namespace sedkit
