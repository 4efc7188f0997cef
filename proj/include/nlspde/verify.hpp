#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "nlspde/backward.hpp"
#include "nlspde/forward.hpp"

namespace nlspde {

struct Metric {
  std::string name;
  double value = 0.0;
  double tolerance = std::numeric_limits<double>::quiet_NaN();
  int pass = -1;  // -1: informational, 0: fail, 1: pass
};

struct ResidualReport {
  std::vector<Metric> metrics;

  void info(const std::string& name, double value) {
    metrics.push_back({name, value, std::numeric_limits<double>::quiet_NaN(), -1});
  }
  void check(const std::string& name, double value, double tolerance) {
    metrics.push_back({name, value, tolerance, value <= tolerance ? 1 : 0});
  }
  bool all_pass() const {
    for (const auto& m : metrics)
      if (m.pass == 0) return false;
    return true;
  }
};

// Discrete norm proxies (documented in report headers): the plain h-weighted
// l2 norm, plus forward-difference and second-difference terms.
double h1_norm(std::span<const double> field, double h);
double h2_norm(std::span<const double> field, double h);

double gram_deviation(const SpectralBasis& basis);
double max_eigen_residual(const EllipticOperator& op, const SpectralBasis& basis);  // relative

// Independent re-accumulation of the integral identity the forward scheme
// satisfies: max defect over stored paths, knots and modes. Certifies the
// bookkeeping (increments, sources, quadrature alignment), not continuum
// accuracy.
double forward_integral_residual(const ModeEnsemble& ens, const ForwardProblem& p);

struct BackwardResiduals {
  double identity = 0.0;    // matched-quadrature self-consistency defect
  double euler_form = 0.0;  // left-endpoint integral-form defect (decays with dt)
};
BackwardResiduals backward_integral_residual(const BackwardSolution& sol, const BackwardProblem& p);

// Discrete per-step defect of the mode-level terminal-value equation
//   dy = (lambda y - phi - sum_d beta_d Upsilon_d) dt + sum_d Upsilon_d dw_d,
// sample-L2 over paths: sqrt( mean_p sum_j |res_j|^2 ) with |.| the mode l2.
double bsde_step_residual(const BackwardSolution& sol, const BackwardProblem& p);

struct ConditioningRow {
  int mode = 0;
  double lambda = 0.0;
  double multiplier = 0.0;     // m_k
  double amplification = 0.0;  // 1/m_k
  double q0 = 0.0;
};

struct ConditioningTable {
  std::vector<ConditioningRow> rows;
  bool exponential_growth = false;  // flagged when rho vanishes a.e.
};

ConditioningTable conditioning_report(const SpectralBasis& basis, const NonlocalWeight& w);

struct StabilityResult {
  std::vector<double> ratios;  // per trial
  double max_ratio = 0.0;
  bool skipped = false;  // zero perturbation guard
};

// Empirical output/input relative-change ratios of a solve map under random
// relative perturbations of the input vector.
StabilityResult stability_probe(const std::function<std::vector<double>(const std::vector<double>&)>& solve,
                                const std::vector<double>& base_input, double rel_perturbation,
                                int trials, std::uint64_t seed);

// Restart consistency: advancing [0,T] in one sweep equals advancing
// [0,tau] then [tau,T] with the same increments. Returns the max absolute
// trajectory discrepancy over stored paths.
double semigroup_restart_forward(const ForwardProblem& p, std::span<const double> xi,
                                 const WienerEnsemble& wiener, double tau);

// Backward analogue: the solution on [0,tau] rebuilt from the interface
// representation at tau equals the full-horizon solution there.
double semigroup_restart_backward(const RandomFieldRep& psi, const BackwardProblem& p,
                                  const WienerEnsemble& wiener, double tau);

}  // namespace nlspde
