#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nlspde/spectral.hpp"
#include "nlspde/weight.hpp"
#include "nlspde/wiener.hpp"

namespace nlspde {

// A random field in martingale-representation form: per mode a mean and,
// per Wiener component, a deterministic step-function integrand. This is
// the data format for the averaged observable psi and for terminal values.
struct ModeRepresentation {
  double mean = 0.0;
  std::vector<StepFunction> integrands;  // indexed by component; may be short or empty
};

struct RandomFieldRep {
  std::vector<ModeRepresentation> entries;  // size K

  int modes() const { return static_cast<int>(entries.size()); }
  int components() const;
  double support_end() const;  // last time any integrand is nonzero
};

struct BackwardProblem {
  SpectralBasis basis;
  NonlocalWeight weight;                    // direction Backward
  double epsilon = 0.0;                     // measurability margin
  double theta = 0.0;                       // source onset (kappa != 0 requires theta in (0, T])
  std::vector<StepFunction> beta_profiles;  // N deterministic zero-order noise profiles
  std::vector<StepFunction> phi_modes;      // K deterministic source tables (may be empty)
  double overflow_bound = 1e12;
};

struct BackwardOptions {
  int workers = 1;
  int store_paths = -1;
  long long store_budget_doubles = 20'000'000;
  bool allow_ill_posed = false;
};

// Pathwise solution of the backward problem. The diffusion coefficients
// Upsilon are deterministic in this class (deterministic integrands and
// noise profiles), so they are stored once, not per path.
struct BackwardSolution {
  TimeGrid tgrid;
  int paths = 0, modes = 0, components = 0;
  std::uint64_t seed = 0;

  std::vector<double> alpha;               // P x K pathwise terminal samples
  std::vector<double> condition_residual;  // P relative pathwise residuals (nonlocal solve only)
  std::vector<double> psi_norm;            // P pathwise ||psi||
  std::vector<double> y_phi;               // K x (M+1) deterministic source component
  std::vector<double> upsilon;             // N x K x (M+1), shared across paths

  int paths_stored = 0;
  std::vector<double> y;  // paths_stored x K x (M+1) total trajectories

  // recovered/used representation of the terminal value
  std::vector<double> ybar;              // K
  std::vector<double> yhat_steps;        // K x N x M
  std::vector<double> det_shift;         // K: deterministic condition shift from beta coupling
  std::vector<double> psi_phi;           // K: source contribution to the condition
  std::vector<double> integrand_bounds;  // K: max_s lambda |gamma_hat| / (c (1-e^{-lambda(T-s)}))
  std::vector<std::string> warnings;

  std::span<const double> path_mode(int p, int k) const {
    size_t row = static_cast<size_t>(tgrid.steps + 1);
    return std::span<const double>(y).subspan(
        (static_cast<size_t>(p) * static_cast<size_t>(modes) + static_cast<size_t>(k)) * row, row);
  }
  std::span<const double> upsilon_mode(int d, int k) const {
    size_t row = static_cast<size_t>(tgrid.steps + 1);
    return std::span<const double>(upsilon).subspan(
        (static_cast<size_t>(d) * static_cast<size_t>(modes) + static_cast<size_t>(k)) * row, row);
  }
  std::span<const double> yhat(int k, int d) const {
    size_t m = static_cast<size_t>(tgrid.steps);
    return std::span<const double>(yhat_steps)
        .subspan((static_cast<size_t>(k) * static_cast<size_t>(components) + static_cast<size_t>(d)) * m, m);
  }
};

// Y_bar = mean / (q(0) + kappa e^{-lambda T}).
double mean_level(const NonlocalWeight& w, double lambda, double mean_gamma);

// Y_hat(s) = 1{s <= T - eps} gamma_hat(s) / q(s), with q evaluated at the
// left endpoint of every grid step. Throws SupportViolation when gamma_hat
// lives past T - eps, IllPosedWeight when q vanishes on its support.
// bound_out, when non-null, receives max_j |Y_hat_j| * q-lower-bound factor.
std::vector<double> integrand_transform(const NonlocalWeight& w, double lambda,
                                        const StepFunction& gamma_hat, double epsilon,
                                        const TimeGrid& tgrid, double* bound_out = nullptr);

// alpha samples: Y_bar + sum_d sum_j Y_hat_dj dw_dj per path.
std::vector<double> reconstruct_terminal(double ybar, std::span<const double> yhat /* N x M */,
                                         const WienerEnsemble& wiener, int workers = 1);

// One path of the per-mode terminal-value process:
//   y(t_j)       = e^{-lambda (T - t_j)} (Y_j + R_j)
//   Upsilon(t_j) = e^{-lambda (T - t_j)} Y_hat(t_j)
// with Y_j the running representation sums and R_j = sum_d int_t^T Y_hat beta.
// y_out has M+1 slots; ups_out (optional) N x (M+1).
void mode_process_path(double lambda, double ybar, std::span<const double> yhat /* N x M */,
                       std::span<const double> beta_steps /* N x M */,
                       std::span<const double> dw /* N x M */, const TimeGrid& tgrid,
                       std::span<double> y_out, std::span<double> ups_out);

// Deterministic source component y^phi at the grid knots, computed by exact
// backward variation of constants; Upsilon contribution is zero.
std::vector<double> source_component(const StepFunction& phi_mode, double lambda, const TimeGrid& tgrid);

// kappa y^phi(0) + int rho(t) y^phi(t) dt, exact piecewise.
double source_condition_value(const StepFunction& phi_mode, double lambda, const NonlocalWeight& w);

BackwardSolution solve_backward_nonlocal(const RandomFieldRep& psi, const BackwardProblem& p,
                                         const WienerEnsemble& wiener, const BackwardOptions& opts = {});

// Cauchy variant: the terminal representation is given directly; used as the
// round-trip oracle and for the terminal-to-initial map.
BackwardSolution backward_cauchy(const RandomFieldRep& terminal_rep, const BackwardProblem& p,
                                 const WienerEnsemble& wiener, const BackwardOptions& opts = {});

// Representation of the pathwise averaging functional of the Cauchy solution
// generated from terminal_rep: means kappa u(0) + int rho u dt (including the
// deterministic beta-coupling shift and the source contribution), integrands
// q(t_j) Y_hat(t_j) per step. Feeding the result to solve_backward_nonlocal
// recovers terminal_rep exactly.
RandomFieldRep condition_representation(const RandomFieldRep& terminal_rep, const BackwardProblem& p,
                                        const TimeGrid& tgrid);

}  // namespace nlspde
