#pragma once

#include <string>

#include "nlspde/piecewise.hpp"

namespace nlspde {

// The averaging functional (kappa, rho) over [0, T] that replaces the
// Cauchy condition, together with the problem direction it serves.
struct NonlocalWeight {
  enum class Direction { Forward, Backward };

  double kappa = 0.0;
  StepFunction rho;  // must cover exactly [0, T] when non-empty
  double horizon = 0.0;
  Direction direction = Direction::Forward;
};

// Per-rule validity report for the weight. `t1` is the witnessing interval
// endpoint: forward weights need rho > 0 on [0, t1] with t1 > 0, backward
// weights need rho > 0 on [t1, T] with t1 < T.
struct WeightReport {
  bool nonneg_ok = false;        // kappa >= 0 and rho >= 0 a.e.
  bool positivity_ok = false;    // direction-specific essential positivity
  bool ill_posed_cauchy = false; // kappa > 0 with rho identically zero
  double t1 = 0.0;
  double ess_inf_window = 0.0;   // ess inf of rho over the witnessing interval
  std::string detail;

  bool valid() const { return nonneg_ok && positivity_ok && !ill_posed_cauchy; }
};

WeightReport validate(const NonlocalWeight& w);

// q(lambda, s) = int_s^T rho(t) e^{-lambda (T-t)} dt, evaluated exactly
// piece by piece. Monotone nonincreasing in s.
double q_factor(const NonlocalWeight& w, double lambda, double s);

// m(lambda) = kappa e^{-lambda T} + int_0^T rho(t) e^{-lambda t} dt; the
// scalar by which the averaging functional acts on a decaying mode.
double forward_multiplier(const NonlocalWeight& w, double lambda);

// q(lambda, 0) + kappa e^{-lambda T}; the backward analogue of the
// multiplier (denominator of the terminal-mean recovery).
double backward_denominator(const NonlocalWeight& w, double lambda);

}  // namespace nlspde
