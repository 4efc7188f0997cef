#pragma once

#include <cmath>
#include <vector>

#include "nlspde/errors.hpp"

namespace nlspde {

// Uniform grid of interior nodes on (0, L) with homogeneous Dirichlet ends.
// Node i (0-based) sits at x = (i+1)*h, h = L/(n+1).
struct Grid1D {
  double length = 0.0;
  int n_interior = 0;
  double spacing = 0.0;

  static Grid1D make(double length, int n_interior) {
    if (!(length > 0.0)) throw ValidationError(ErrorKind::BadGrid, "domain length must be positive");
    if (n_interior < 3) throw ValidationError(ErrorKind::BadGrid, "need at least 3 interior nodes");
    Grid1D g;
    g.length = length;
    g.n_interior = n_interior;
    g.spacing = length / static_cast<double>(n_interior + 1);
    return g;
  }

  double node(int i) const { return spacing * static_cast<double>(i + 1); }

  std::vector<double> nodes() const {
    std::vector<double> xs(static_cast<size_t>(n_interior));
    for (int i = 0; i < n_interior; ++i) xs[static_cast<size_t>(i)] = node(i);
    return xs;
  }
};

// Uniform time grid on [0, T] with M steps, knots t_j = j*dt.
struct TimeGrid {
  double horizon = 0.0;
  int steps = 0;
  double dt = 0.0;

  static TimeGrid make(double horizon, int steps) {
    if (!(horizon > 0.0)) throw ValidationError(ErrorKind::BadTime, "horizon must be positive");
    if (steps < 2) throw ValidationError(ErrorKind::BadTime, "need at least 2 time steps");
    TimeGrid g;
    g.horizon = horizon;
    g.steps = steps;
    g.dt = horizon / static_cast<double>(steps);
    return g;
  }

  double knot(int j) const { return dt * static_cast<double>(j); }

  // Index of a knot equal to t; throws GridMisaligned otherwise.
  int knot_index(double t) const {
    double r = t / dt;
    int j = static_cast<int>(std::llround(r));
    if (j < 0 || j > steps || std::abs(r - static_cast<double>(j)) > 1e-9 * static_cast<double>(steps))
      throw SolverError(ErrorKind::GridMisaligned, "time " + std::to_string(t) + " is not a grid knot");
    return j;
  }
};

}  // namespace nlspde
