#include "nlspde/weight.hpp"

#include <cmath>

namespace nlspde {

namespace {

void check_weight_shape(const NonlocalWeight& w) {
  if (!(w.horizon >= 0.0)) throw ValidationError(ErrorKind::BadConfig, "weight horizon must be nonnegative");
  w.rho.check();
  if (!w.rho.empty()) {
    if (w.horizon == 0.0)
      throw ValidationError(ErrorKind::BadConfig, "zero-horizon weight cannot carry a rho table");
    if (std::abs(w.rho.start()) > 1e-12 || std::abs(w.rho.end() - w.horizon) > 1e-12)
      throw ValidationError(ErrorKind::BadConfig, "rho breakpoints must span [0, T] exactly");
  }
}

}  // namespace

WeightReport validate(const NonlocalWeight& w) {
  check_weight_shape(w);
  WeightReport rep;

  rep.nonneg_ok = w.kappa >= 0.0;
  bool rho_zero = true;
  for (double v : w.rho.values) {
    if (v < 0.0) rep.nonneg_ok = false;
    if (v > 0.0) rho_zero = false;
  }
  if (w.rho.empty()) rho_zero = true;

  rep.ill_posed_cauchy = rho_zero && w.kappa > 0.0;

  if (rho_zero) {
    rep.positivity_ok = false;
    rep.t1 = (w.direction == NonlocalWeight::Direction::Forward) ? 0.0 : w.horizon;
    rep.detail = rep.ill_posed_cauchy
                     ? "rho vanishes a.e. with kappa > 0: ill-posed Cauchy case"
                     : "rho vanishes a.e.";
    return rep;
  }

  const auto& bp = w.rho.breakpoints;
  const auto& vals = w.rho.values;
  if (w.direction == NonlocalWeight::Direction::Forward) {
    // largest T1 with rho > 0 on [0, T1]
    size_t j = 0;
    while (j < vals.size() && vals[j] > 0.0) ++j;
    rep.t1 = bp[j];
    rep.positivity_ok = rep.t1 > 0.0;
    rep.ess_inf_window = 0.0;
    if (rep.positivity_ok) {
      rep.ess_inf_window = vals[0];
      for (size_t i = 0; i < j; ++i) rep.ess_inf_window = std::min(rep.ess_inf_window, vals[i]);
      rep.detail = "rho >= " + std::to_string(rep.ess_inf_window) + " on [0, " + std::to_string(rep.t1) + "]";
    } else {
      rep.detail = "rho is not essentially positive near t = 0";
    }
  } else {
    // smallest T1 with rho > 0 on [T1, T]; rho, being piecewise-constant,
    // is automatically continuous from the left at t = T
    size_t j = vals.size();
    while (j > 0 && vals[j - 1] > 0.0) --j;
    rep.t1 = bp[j];
    rep.positivity_ok = rep.t1 < w.horizon;
    if (rep.positivity_ok) {
      rep.ess_inf_window = vals[j];
      for (size_t i = j; i < vals.size(); ++i) rep.ess_inf_window = std::min(rep.ess_inf_window, vals[i]);
      rep.detail = "rho >= " + std::to_string(rep.ess_inf_window) + " on [" + std::to_string(rep.t1) + ", T]";
    } else {
      rep.detail = "rho is not essentially positive near t = T";
    }
  }
  return rep;
}

double q_factor(const NonlocalWeight& w, double lambda, double s) {
  check_weight_shape(w);
  if (s < -1e-12 || s > w.horizon + 1e-12)
    throw SolverError(ErrorKind::BadTime, "s = " + std::to_string(s) + " outside [0, T]");
  if (!(lambda > 0.0)) throw SolverError(ErrorKind::BadConfig, "q factor needs lambda > 0");
  const double T = w.horizon;
  double acc = 0.0;
  for (size_t j = 0; j < w.rho.pieces(); ++j) {
    double a = std::max(w.rho.breakpoints[j], s);
    double b = w.rho.breakpoints[j + 1];
    if (b <= a) continue;
    // rho_j * int_a^b e^{-lambda (T-t)} dt = rho_j e^{-lambda(T-b)} (1-e^{-lambda(b-a)})/lambda
    acc += w.rho.values[j] * std::exp(-lambda * (T - b)) * (b - a) * expm1_div(lambda * (b - a));
  }
  return acc;
}

double forward_multiplier(const NonlocalWeight& w, double lambda) {
  check_weight_shape(w);
  if (!(lambda > 0.0)) throw SolverError(ErrorKind::BadConfig, "multiplier needs lambda > 0");
  double acc = w.kappa * std::exp(-lambda * w.horizon);
  for (size_t j = 0; j < w.rho.pieces(); ++j) {
    double a = w.rho.breakpoints[j];
    double b = w.rho.breakpoints[j + 1];
    // rho_j * int_a^b e^{-lambda t} dt = rho_j e^{-lambda a} (1-e^{-lambda(b-a)})/lambda
    acc += w.rho.values[j] * std::exp(-lambda * a) * (b - a) * expm1_div(lambda * (b - a));
  }
  if (acc == 0.0)
    throw SolverError(ErrorKind::DegenerateMultiplier,
                      "multiplier underflowed to zero at lambda = " + std::to_string(lambda));
  return acc;
}

double backward_denominator(const NonlocalWeight& w, double lambda) {
  double d = q_factor(w, lambda, 0.0) + w.kappa * std::exp(-lambda * w.horizon);
  if (d == 0.0)
    throw SolverError(ErrorKind::IllPosedWeight,
                      "terminal-mean denominator underflowed at lambda = " + std::to_string(lambda));
  return d;
}

}  // namespace nlspde
