#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "nlspde/spectral.hpp"
#include "nlspde/weight.hpp"
#include "nlspde/wiener.hpp"

namespace nlspde {

// Continuous piecewise-linear function of time (mode coefficient table);
// constant extension outside the knot range.
struct PiecewiseLinearFn {
  std::vector<double> t;
  std::vector<double> v;

  bool empty() const { return t.empty(); }
  double operator()(double s) const;
  void check() const;
};

// One Wiener component of the forward noise operator
//   B u = beta_bar(x) u_x + beta(x) u,  plus the additive profile h(x,t).
// beta_bar must vanish at the boundary-adjacent nodes. h is stored in mode
// coordinates as step functions of time.
struct ForwardNoise {
  std::vector<double> beta_bar_nodes;  // size n or empty (== 0)
  std::vector<double> beta_nodes;      // size n or empty (== 0)
  std::vector<StepFunction> h_modes;   // size K or empty (== 0)
};

struct ForwardProblem {
  SpectralBasis basis;
  EllipticOperator op;    // discretization the basis came from
  NonlocalWeight weight;  // direction Forward
  std::vector<PiecewiseLinearFn> phi_mean;           // size K or empty: mean source per mode
  std::vector<std::vector<StepFunction>> phi_fluct;  // [K][N] or empty: zero-mean source integrands
  std::vector<ForwardNoise> noise;                   // N components
  double theta = 0.0;
  double coercivity_floor = 0.0;  // required superparabolicity margin
  double overflow_bound = 1e12;
};

// Throws ValidationError on any structural violation (boundary noise,
// superparabolicity, theta rule, shape mismatches).
void validate_forward_problem(const ForwardProblem& p);

// delta_hat = min_i [ a(x_i) - 1/2 sum_d beta_bar_d(x_i)^2 ], diffusion at
// nodes taken as the average of the adjacent midpoint samples.
double superparabolicity_margin(const EllipticOperator& op, const std::vector<ForwardNoise>& noise);

struct MeanTrajectory {
  TimeGrid tgrid;
  int modes = 0;
  std::vector<double> values;  // K x (M+1), row-major [k][j]

  double at(int k, int j) const {
    return values[static_cast<size_t>(k) * static_cast<size_t>(tgrid.steps + 1) + static_cast<size_t>(j)];
  }
};

// Exact exponential integrator for the decoupled mean modes
// u_k' = -lambda_k u_k + phi_k(t); exact for piecewise-linear phi.
MeanTrajectory mean_evolve(const SpectralBasis& basis, std::span<const double> xi,
                           const std::vector<PiecewiseLinearFn>& phi_mean, const TimeGrid& tgrid);

// Diagonal action of the averaging functional on initial coefficients.
std::vector<double> apply_M0(const SpectralBasis& basis, const NonlocalWeight& w,
                             std::span<const double> xi);

// Averaging functional applied to the zero-initial mean response of phi,
// integrated exactly (no time grid involved).
std::vector<double> apply_M(const SpectralBasis& basis, const NonlocalWeight& w,
                            const std::vector<PiecewiseLinearFn>& phi_mean);

struct RecoveryOptions {
  bool allow_ill_posed = false;
  double tail_warn_fraction = 0.1;
};

struct RecoveryResult {
  std::vector<double> xi;             // recovered mode coefficients
  std::vector<double> multipliers;    // m_k
  std::vector<double> amplification;  // 1/m_k
  double mu_norm = 0.0;
  double tail_norm = 0.0;  // || mu - lift(project(mu)) ||_h
  bool tail_warning = false;
  bool ill_posed = false;
};

RecoveryResult recover_initial(std::span<const double> mu_field,
                               const std::vector<PiecewiseLinearFn>& phi_mean,
                               const SpectralBasis& basis, const NonlocalWeight& w,
                               const RecoveryOptions& opts = {});

struct SimOptions {
  int workers = 1;
  int store_paths = -1;  // -1: keep trajectories while under the budget
  long long store_budget_doubles = 20'000'000;
};

// Monte Carlo sample of the mode dynamics. Trajectories are kept for the
// first `paths_stored` paths; the per-path averaging functional and the
// terminal values are always kept.
struct ModeEnsemble {
  TimeGrid tgrid;
  int paths = 0;
  int modes = 0;
  int components = 0;
  std::uint64_t seed = 0;
  NonlocalWeight acc_weight;
  std::vector<double> condition_acc;  // P x K
  std::vector<double> terminal;       // P x K
  int paths_stored = 0;
  std::vector<double> traj;  // paths_stored x K x (M+1)

  std::span<const double> path_mode(int p, int k) const {
    size_t row = static_cast<size_t>(tgrid.steps + 1);
    return std::span<const double>(traj).subspan(
        (static_cast<size_t>(p) * static_cast<size_t>(modes) + static_cast<size_t>(k)) * row, row);
  }
};

ModeEnsemble simulate_forward(const ForwardProblem& p, std::span<const double> xi,
                              const WienerEnsemble& wiener, const SimOptions& opts = {});

struct NonlocalAverage {
  std::vector<double> mean;   // K
  std::vector<double> se;     // K (NaN when undefined)
  bool se_valid = false;
};

NonlocalAverage nonlocal_average(const ModeEnsemble& ens, const NonlocalWeight& w);

struct ForwardSolveResult {
  RecoveryResult recovery;
  ModeEnsemble ensemble;
  NonlocalAverage average;
  double recovery_residual = 0.0;   // || mu_hat - mu ||_h
  double max_h_norm = 0.0;          // max_t of the mean-field h-norm
  double max_grad_norm = 0.0;       // max_t of the forward-difference norm
  double superparabolicity = 0.0;   // delta_hat (when noise supplied)
};

ForwardSolveResult solve_forward_nonlocal(std::span<const double> mu_field, const ForwardProblem& p,
                                          const WienerEnsemble& wiener, const SimOptions& opts = {},
                                          const RecoveryOptions& ropts = {});

// Internals shared with the verification harness: everything the step
// recursion consumes, precomputed per (component, mode, step).
struct ForwardStepData {
  int modes = 0, components = 0, steps = 0;
  TimeGrid tgrid;
  std::vector<double> decay;       // K: e^{-lambda dt}
  std::vector<double> eta_gain;    // K: (1 - e^{-lambda dt}) / lambda
  std::vector<double> det_source;  // K x M: exact per-step mean-source increment
  std::vector<double> bhat;        // N x K x K mode-space noise operator
  std::vector<char> has_b;         // N
  std::vector<double> h_steps;     // N x K x M
  std::vector<char> has_h;
  std::vector<double> fluct_steps;  // N x K x M
  std::vector<char> has_fluct;
  std::vector<double> rho_steps;  // M
  double kappa = 0.0;
};

ForwardStepData build_forward_step_data(const ForwardProblem& p, const TimeGrid& tgrid);

// One step of the mode recursion at step j; y (K) and eta (K) advance in
// place. Every consumer of the recursion (solver, restart checks) goes
// through this single definition so trajectories agree bitwise.
void forward_step_once(const ForwardStepData& d, int j, std::span<double> y, std::span<double> eta,
                       std::span<const double> dw, double overflow_bound);

// Exact advance of y' = -lambda y + phi(t) from t0 to t1 (phi may be null).
double mean_advance(double lambda, const PiecewiseLinearFn* phi, double t0, double t1, double y);

// kappa u(T) + int_0^T rho u dt for the exact mean trajectory starting at y0.
double weighted_mean_functional(double lambda, const PiecewiseLinearFn* phi,
                                const NonlocalWeight& w, double y0);

}  // namespace nlspde
