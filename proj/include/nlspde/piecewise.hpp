#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "nlspde/errors.hpp"
#include "nlspde/grid.hpp"

namespace nlspde {

// Continuous piecewise-linear table; linear interpolation between knots,
// clamped outside the table range.
struct LinearTable {
  std::vector<double> x;
  std::vector<double> value;

  static LinearTable constant(double c) { return LinearTable{{0.0, 1.0}, {c, c}}; }

  void check() const {
    if (x.size() != value.size() || x.size() < 2)
      throw ValidationError(ErrorKind::BadConfig, "linear table needs matching x/value arrays of size >= 2");
    for (size_t i = 1; i < x.size(); ++i)
      if (!(x[i] > x[i - 1]))
        throw ValidationError(ErrorKind::BadConfig, "linear table abscissae must be strictly increasing");
    for (double v : value)
      if (!std::isfinite(v)) throw ValidationError(ErrorKind::BadConfig, "linear table has non-finite value");
  }

  double operator()(double xi) const {
    if (xi <= x.front()) return value.front();
    if (xi >= x.back()) return value.back();
    auto it = std::upper_bound(x.begin(), x.end(), xi);
    size_t j = static_cast<size_t>(it - x.begin());
    double w = (xi - x[j - 1]) / (x[j] - x[j - 1]);
    return value[j - 1] + w * (value[j] - value[j - 1]);
  }
};

// Piecewise-constant function of time: value[j] on [breakpoints[j], breakpoints[j+1]).
// Zero outside the breakpoint range; the final value extends to the right
// endpoint itself (so value_at(end) is the last piece).
struct StepFunction {
  std::vector<double> breakpoints;  // size m+1
  std::vector<double> values;       // size m

  static StepFunction constant(double c, double t0, double t1) {
    return StepFunction{{t0, t1}, {c}};
  }
  static StepFunction zero() { return StepFunction{{}, {}}; }

  bool empty() const { return values.empty(); }
  double start() const { return breakpoints.empty() ? 0.0 : breakpoints.front(); }
  double end() const { return breakpoints.empty() ? 0.0 : breakpoints.back(); }
  size_t pieces() const { return values.size(); }

  void check() const {
    if (breakpoints.empty() && values.empty()) return;
    if (breakpoints.size() != values.size() + 1)
      throw ValidationError(ErrorKind::BadConfig, "step function needs one more breakpoint than values");
    for (size_t i = 1; i < breakpoints.size(); ++i)
      if (!(breakpoints[i] > breakpoints[i - 1]))
        throw ValidationError(ErrorKind::BadConfig, "step function breakpoints must be strictly increasing");
    for (double v : values)
      if (!std::isfinite(v)) throw ValidationError(ErrorKind::BadConfig, "step function has non-finite value");
  }

  double value_at(double t) const {
    if (empty() || t < breakpoints.front() || t > breakpoints.back()) return 0.0;
    if (t == breakpoints.back()) return values.back();
    auto it = std::upper_bound(breakpoints.begin(), breakpoints.end(), t);
    return values[static_cast<size_t>(it - breakpoints.begin()) - 1];
  }

  bool is_zero() const {
    for (double v : values)
      if (v != 0.0) return false;
    return true;
  }

  // Last time past which the function is identically zero.
  double support_end() const {
    for (size_t j = values.size(); j-- > 0;)
      if (values[j] != 0.0) return breakpoints[j + 1];
    return breakpoints.empty() ? 0.0 : breakpoints.front();
  }
};

// Sample a step function onto the steps of a time grid: out[j] is the value
// on [t_j, t_{j+1}). Every breakpoint must coincide with a grid knot,
// otherwise the piece decomposition is ambiguous.
std::vector<double> sample_steps(const StepFunction& f, const TimeGrid& grid);

// Exactness helpers for integrals against exponentials. All are evaluated
// with series fallbacks so they stay accurate for small arguments.
//
//   expm1_div(x)  = (1 - e^{-x}) / x          -> 1 as x -> 0
//   expm1_div2(x) = (1 - (1+x) e^{-x}) / x^2  -> 1/2 as x -> 0
double expm1_div(double x);
double expm1_div2(double x);

}  // namespace nlspde
