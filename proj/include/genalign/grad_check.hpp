#pragma once

#include "genalign/ndiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace genalign::nd {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Index worst_index = -1;
  Index checked = 0;
  bool passed = false;
};

/// Compares the reverse-mode gradient of `f` at `x` with a five-point central
/// difference, (8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h. Its O(h^4)
/// truncation error lets h stay large enough that rounding in f does not
/// swamp entries near the floor.
///
/// `f` maps (graph, x) to a scalar Var. The per-entry relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, abs_floor); entries whose
/// gradient is essentially zero are thus judged on absolute error. When
/// `max_coords` is positive only that many coordinates, chosen with `seed`,
/// are perturbed.
template <typename F>
GradCheckReport grad_check(F&& f, const Matrix<double>& x, double eps = 1e-4, double tol = 1e-4,
                           double abs_floor = 1e-6, Index max_coords = -1, std::uint64_t seed = 0) {
  Matrix<double> analytic;
  {
    Graph<double> g;
    auto xv = g.variable(x);
    auto loss = f(g, xv);
    g.backward(loss);
    analytic = xv.grad();
  }
  auto eval = [&](const Matrix<double>& at) {
    Graph<double> g;
    auto xv = g.constant(at);
    return f(g, xv).item();
  };

  std::vector<Index> coords(static_cast<std::size_t>(x.size()));
  std::iota(coords.begin(), coords.end(), Index{0});
  if (max_coords > 0 && max_coords < x.size()) {
    std::mt19937_64 rng(seed);
    for (Index i = 0; i < max_coords; ++i) {
      const auto j = i + static_cast<Index>(rng() % static_cast<std::uint64_t>(x.size() - i));
      std::swap(coords[static_cast<std::size_t>(i)], coords[static_cast<std::size_t>(j)]);
    }
    coords.resize(static_cast<std::size_t>(max_coords));
  }

  GradCheckReport report;
  Matrix<double> probe = x;
  for (Index flat : coords) {
    const Index r = flat / x.cols();
    const Index c = flat % x.cols();
    const double orig = probe(r, c);
    auto at = [&](double offset) {
      probe(r, c) = orig + offset;
      const double v = eval(probe);
      probe(r, c) = orig;
      return v;
    };
    const double near = at(eps) - at(-eps);
    const double far = at(2.0 * eps) - at(-2.0 * eps);
    const double numeric = (8.0 * near - far) / (12.0 * eps);
    const double a = analytic(r, c);
    const double abs_err = std::abs(a - numeric);
    const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), abs_floor});
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    if (rel > report.max_rel_error || report.worst_index < 0) {
      report.max_rel_error = std::max(report.max_rel_error, rel);
      report.worst_index = flat;
    }
    ++report.checked;
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace genalign::nd
