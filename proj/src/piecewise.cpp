#include "nlspde/piecewise.hpp"

#include <cmath>

namespace nlspde {

std::vector<double> sample_steps(const StepFunction& f, const TimeGrid& grid) {
  f.check();
  std::vector<double> out(static_cast<size_t>(grid.steps), 0.0);
  if (f.empty()) return out;
  for (double b : f.breakpoints) {
    if (b < -1e-12 || b > grid.horizon + 1e-12)
      throw SolverError(ErrorKind::GridMisaligned,
                        "breakpoint " + std::to_string(b) + " outside [0, T]");
    double r = b / grid.dt;
    if (std::abs(r - std::round(r)) > 1e-9 * static_cast<double>(grid.steps))
      throw SolverError(ErrorKind::GridMisaligned,
                        "breakpoint " + std::to_string(b) + " does not sit on a grid knot");
  }
  for (int j = 0; j < grid.steps; ++j) {
    // breakpoints are knot-aligned, so the midpoint lies strictly inside one
    // piece and represents the whole step [t_j, t_{j+1})
    out[static_cast<size_t>(j)] = f.value_at(grid.knot(j) + 0.5 * grid.dt);
  }
  return out;
}

double expm1_div(double x) {
  if (std::abs(x) < 1e-8) return 1.0 - x / 2.0 + x * x / 6.0;
  return -std::expm1(-x) / x;
}

double expm1_div2(double x) {
  if (std::abs(x) < 1e-4) {
    // 1/2 - x/3 + x^2/8 - x^3/30 + x^4/144
    return 0.5 + x * (-1.0 / 3.0 + x * (0.125 + x * (-1.0 / 30.0 + x / 144.0)));
  }
  return (1.0 - (1.0 + x) * std::exp(-x)) / (x * x);
}

}  // namespace nlspde
