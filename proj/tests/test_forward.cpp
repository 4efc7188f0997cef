#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "nlspde/forward.hpp"
#include "test_support.hpp"

using namespace nlspde;
using namespace testsup;
using Dir = NonlocalWeight::Direction;

namespace {

std::vector<PiecewiseLinearFn> no_phi;

std::vector<double> terminal_of(const ModeEnsemble& ens, int path) {
  std::vector<double> out(static_cast<size_t>(ens.modes));
  for (int k = 0; k < ens.modes; ++k) out[k] = ens.terminal[static_cast<size_t>(path) * ens.modes + k];
  return out;
}

}  // namespace

TEST_CASE("mean modes decay exponentially without a source") {
  SpectralBasis basis = laplace_basis(127, 4);
  TimeGrid tg = TimeGrid::make(1.0, 100);
  std::vector<double> xi(4, 1.0);
  MeanTrajectory mean = mean_evolve(basis, xi, no_phi, tg);
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j <= 100; ++j) {
      double expected = std::exp(-basis.eigenvalues[k] * tg.knot(j));
      CHECK(std::abs(mean.at(k, j) - expected) <= 1e-12);
    }
}

TEST_CASE("constant source lambda_k saturates to one") {
  SpectralBasis basis = synthetic_basis({1.0, 4.0, 9.0});
  TimeGrid tg = TimeGrid::make(1.0, 64);
  std::vector<double> xi(3, 0.0);
  std::vector<PiecewiseLinearFn> phi(3);
  for (int k = 0; k < 3; ++k) phi[k] = PiecewiseLinearFn{{0.0, 1.0}, {basis.eigenvalues[k], basis.eigenvalues[k]}};
  MeanTrajectory mean = mean_evolve(basis, xi, phi, tg);
  for (int k = 0; k < 3; ++k)
    for (int j = 0; j <= 64; j += 8) {
      double expected = 1.0 - std::exp(-basis.eigenvalues[k] * tg.knot(j));
      CHECK(std::abs(mean.at(k, j) - expected) <= 1e-13);
    }
}

TEST_CASE("zero data evolves to zero") {
  SpectralBasis basis = laplace_basis(63, 3);
  std::vector<double> xi(3, 0.0);
  MeanTrajectory mean = mean_evolve(basis, xi, no_phi, TimeGrid::make(1.0, 16));
  for (double v : mean.values) CHECK(v == 0.0);
}

TEST_CASE("exact integrator handles kinked piecewise-linear sources") {
  // one mode, phi with a kink strictly inside a step; compare against a
  // brute-force quadrature of the variation-of-constants formula
  SpectralBasis basis = synthetic_basis({2.0});
  TimeGrid tg = TimeGrid::make(1.0, 10);  // dt = 0.1, kink at 0.25 is interior
  PiecewiseLinearFn phi{{0.0, 0.25, 1.0}, {1.0, -0.5, 2.0}};
  std::vector<PiecewiseLinearFn> tab{phi};
  std::vector<double> xi{0.7};
  MeanTrajectory mean = mean_evolve(basis, xi, tab, tg);
  double t = 1.0;
  double oracle = 0.7 * std::exp(-2.0 * t) +
                  simpson([&](double s) { return std::exp(-2.0 * (t - s)) * phi(s); }, 0.0, 0.25, 4000) +
                  simpson([&](double s) { return std::exp(-2.0 * (t - s)) * phi(s); }, 0.25, 1.0, 40000);
  CHECK(mean.at(0, 10) == doctest::Approx(oracle).epsilon(1e-9));
}

TEST_CASE("averaging operators act diagonally and through the mean response") {
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Forward);
  SpectralBasis basis = synthetic_basis({1.0, 4.0});

  SUBCASE("diagonal action matches the multiplier") {
    std::vector<double> xi{1.0, 0.0};
    std::vector<double> out = apply_M0(basis, w, xi);
    CHECK(out[0] == doctest::Approx(0.6321205588285577).epsilon(1e-14));
    CHECK(out[1] == 0.0);
  }

  SUBCASE("zero horizon acts as the identity") {
    NonlocalWeight id = const_weight(1.0, 0.0, 0.0, Dir::Forward);
    std::vector<double> xi{0.3, -2.0};
    std::vector<double> out = apply_M0(basis, id, xi);
    CHECK(out[0] == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(out[1] == doctest::Approx(-2.0).epsilon(1e-15));
  }

  SUBCASE("zero source maps to zero") {
    std::vector<double> out = apply_M(basis, w, no_phi);
    CHECK(out[0] == 0.0);
    CHECK(out[1] == 0.0);
  }

  SUBCASE("source response agrees with brute-force quadrature") {
    std::vector<PiecewiseLinearFn> phi(2);
    phi[0] = PiecewiseLinearFn{{0.0, 0.4, 1.0}, {0.5, 1.2, 0.3}};
    phi[1] = PiecewiseLinearFn{{0.0, 1.0}, {1.0, -1.0}};
    std::vector<double> out = apply_M(basis, w, phi);
    for (int k = 0; k < 2; ++k) {
      double lambda = basis.eigenvalues[k];
      // u(t) = int_0^t e^{-lambda(t-s)} phi(s) ds, target int_0^1 u dt
      auto u = [&](double t) {
        return simpson([&](double s) { return std::exp(-lambda * (t - s)) * phi[k](s); }, 0.0, t,
                       2000);
      };
      double oracle = simpson(u, 0.0, 1.0, 2000);
      CHECK(out[k] == doctest::Approx(oracle).epsilon(1e-6));
    }
  }
}

TEST_CASE("recovery inverts the diagonal map") {
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Forward);

  SUBCASE("closed-form rates (1, 4) recover by dividing out the multiplier") {
    SpectralBasis basis = synthetic_basis({1.0, 4.0});
    // m(lambda) = (1 - e^{-lambda}) / lambda, so mu_k = 1 - e^{-lambda_k}
    // recovers xi_k = lambda_k
    std::vector<double> mu_modes{1.0 - std::exp(-1.0), 1.0 - std::exp(-4.0)};
    std::vector<double> mu = lift(mu_modes, basis);
    RecoveryResult rec = recover_initial(mu, no_phi, basis, w);
    CHECK(rec.xi[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rec.xi[1] == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(rec.multipliers[0] > 0.0);
    CHECK(rec.multipliers[1] > 0.0);
  }

  SUBCASE("round trip with a nonzero source is exact to rounding") {
    SpectralBasis basis = laplace_basis(255, 5);
    std::vector<PiecewiseLinearFn> phi(5);
    for (int k = 0; k < 5; ++k)
      phi[k] = PiecewiseLinearFn{{0.0, 0.3, 1.0}, {0.2 * (k + 1), -0.1, 0.5}};
    std::vector<double> xi_star{1.0, -0.5, 0.25, 0.0, 2.0};
    std::vector<double> mu_modes = apply_M0(basis, w, xi_star);
    std::vector<double> mphi = apply_M(basis, w, phi);
    for (int k = 0; k < 5; ++k) mu_modes[k] += mphi[k];
    RecoveryResult rec = recover_initial(lift(mu_modes, basis), phi, basis, w);
    double err = 0.0, nrm = 0.0;
    for (int k = 0; k < 5; ++k) {
      err += (rec.xi[k] - xi_star[k]) * (rec.xi[k] - xi_star[k]);
      nrm += xi_star[k] * xi_star[k];
    }
    CHECK(std::sqrt(err / nrm) <= 1e-10);
  }

  SUBCASE("ill-posed terminal weight amplifies exponentially under the override") {
    SpectralBasis basis = synthetic_basis({25.0});
    NonlocalWeight cauchy = const_weight(1.0, 0.0, 1.0, Dir::Forward);
    std::vector<double> mu = lift(std::vector<double>{1.0}, basis);
    CHECK_THROWS_AS(recover_initial(mu, no_phi, basis, cauchy), ValidationError);
    RecoveryOptions opts;
    opts.allow_ill_posed = true;
    RecoveryResult rec = recover_initial(mu, no_phi, basis, cauchy, opts);
    CHECK(rec.ill_posed);
    CHECK(rec.xi[0] == doctest::Approx(72004899337.38588).epsilon(1e-11));
    CHECK(rec.amplification[0] == doctest::Approx(72004899337.38588).epsilon(1e-11));
  }

  SUBCASE("tail outside the retained modes is reported") {
    SpectralBasis basis = laplace_basis(255, 2);
    std::vector<double> mu(255);
    for (int i = 0; i < 255; ++i) {
      double x = basis.grid.node(i);
      mu[i] = std::sin(x) + 0.8 * std::sin(5.0 * x);  // mode 5 is outside K=2
    }
    RecoveryOptions opts;
    opts.tail_warn_fraction = 0.1;
    RecoveryResult rec = recover_initial(mu, no_phi, basis, w, opts);
    CHECK(rec.tail_norm > 0.5);
    CHECK(rec.tail_warning);
  }
}

TEST_CASE("noiseless simulation reproduces the mean trajectory") {
  SpectralBasis basis = laplace_basis(63, 3);
  NonlocalWeight w = const_weight(0.5, 1.0, 1.0, Dir::Forward);
  ForwardProblem p = forward_problem(basis, w);
  p.theta = 0.5;  // kappa != 0 needs theta in [0, T)
  std::vector<PiecewiseLinearFn> phi(3);
  phi[0] = PiecewiseLinearFn{{0.0, 0.25, 1.0}, {1.0, 0.0, 0.6}};  // knots on the grid
  p.phi_mean = phi;
  std::vector<double> xi{1.0, -0.3, 0.2};
  WienerEnsemble wiener(11, 5, 1, TimeGrid::make(1.0, 16));
  SimOptions opts;
  opts.store_paths = 5;
  ModeEnsemble ens = simulate_forward(p, xi, wiener, opts);
  MeanTrajectory mean = mean_evolve(basis, xi, phi, wiener.grid());
  for (int path = 0; path < 5; ++path)
    for (int k = 0; k < 3; ++k) {
      auto y = ens.path_mode(path, k);
      for (int j = 0; j <= 16; ++j)
        CHECK(std::abs(y[j] - mean.at(k, j)) <= 1e-13 * (1.0 + std::abs(mean.at(k, j))));
    }
}

TEST_CASE("zero-order noise keeps the exponential mean") {
  SpectralBasis basis = synthetic_basis({1.3});
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Forward);
  ForwardProblem p = forward_problem(basis, w);
  ForwardNoise comp;
  comp.beta_nodes.assign(static_cast<size_t>(basis.grid.n_interior), 0.4);
  p.noise.push_back(comp);
  std::vector<double> xi{1.0};
  const int P = 10000;
  WienerEnsemble wiener(21, P, 1, TimeGrid::make(1.0, 200));
  SimOptions opts;
  opts.store_paths = 0;
  ModeEnsemble ens = simulate_forward(p, xi, wiener, opts);
  std::vector<double> terms(P);
  for (int path = 0; path < P; ++path) terms[path] = terminal_of(ens, path)[0];
  double target = std::exp(-1.3);
  double se = std::sqrt(variance_of(terms) / P);
  CHECK(std::abs(mean_of(terms) - target) <= 3.0 * se);
}

TEST_CASE("additive mode noise reproduces the stationary variance law") {
  SpectralBasis basis = laplace_basis(63, 1);
  double lambda = basis.eigenvalues[0];
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Forward);
  ForwardProblem p = forward_problem(basis, w);
  ForwardNoise comp;
  comp.h_modes.resize(1);
  comp.h_modes[0] = StepFunction::constant(1.0, 0.0, 1.0);
  p.noise.push_back(comp);
  std::vector<double> xi{0.0};
  const int P = 20000;
  WienerEnsemble wiener(77, P, 1, TimeGrid::make(1.0, 200));
  SimOptions opts;
  opts.store_paths = 0;
  ModeEnsemble ens = simulate_forward(p, xi, wiener, opts);
  std::vector<double> terms(P);
  for (int path = 0; path < P; ++path) terms[path] = terminal_of(ens, path)[0];
  double target = (1.0 - std::exp(-2.0 * lambda)) / (2.0 * lambda);
  double se = target * std::sqrt(2.0 / (P - 1));
  CHECK(std::abs(variance_of(terms) - target) <= 3.0 * se + 0.43 * lambda / 200.0);
}

TEST_CASE("overflow guard raises on coarse unstable configurations") {
  SpectralBasis basis = synthetic_basis({0.5});
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Forward);
  ForwardProblem p = forward_problem(basis, w);
  p.overflow_bound = 10.0;
  ForwardNoise comp;
  comp.beta_nodes.assign(static_cast<size_t>(basis.grid.n_interior), 50.0);
  p.noise.push_back(comp);
  std::vector<double> xi{1.0};
  WienerEnsemble wiener(5, 64, 1, TimeGrid::make(1.0, 64));
  CHECK_THROWS_AS(simulate_forward(p, xi, wiener), SolverError);
}

TEST_CASE("gradient noise must vanish next to the boundary") {
  SpectralBasis basis = laplace_basis(63, 2);
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Forward);
  ForwardProblem p = forward_problem(basis, w);
  ForwardNoise comp;
  comp.beta_bar_nodes.assign(static_cast<size_t>(basis.grid.n_interior), 0.3);  // nonzero at ends
  p.noise.push_back(comp);
  std::vector<double> xi{1.0, 0.0};
  WienerEnsemble wiener(5, 2, 1, TimeGrid::make(1.0, 8));
  CHECK_THROWS_AS(simulate_forward(p, xi, wiener), ValidationError);
}

TEST_CASE("averaged observable of a noiseless run matches the operators") {
  SpectralBasis basis = laplace_basis(63, 3);
  NonlocalWeight w;
  w.kappa = 0.4;
  w.horizon = 1.0;
  w.rho = StepFunction{{0.0, 0.5, 1.0}, {1.0, 2.0}};
  w.direction = Dir::Forward;
  ForwardProblem p = forward_problem(basis, w);
  p.theta = 0.0;
  std::vector<double> xi{1.0, -0.5, 0.25};
  WienerEnsemble wiener(3, 2, 1, TimeGrid::make(1.0, 400));
  ModeEnsemble ens = simulate_forward(p, xi, wiener);
  NonlocalAverage avg = nonlocal_average(ens, w);
  std::vector<double> exact = apply_M0(basis, w, xi);
  for (int k = 0; k < 3; ++k)
    CHECK(std::abs(avg.mean[k] - exact[k]) <= 2e-5 * (1.0 + std::abs(exact[k])));
}

TEST_CASE("averaging under a different weight recomputes from trajectories") {
  SpectralBasis basis = laplace_basis(63, 2);
  NonlocalWeight run_w = const_weight(0.0, 1.0, 1.0, Dir::Forward);
  NonlocalWeight other;
  other.kappa = 0.5;
  other.horizon = 1.0;
  other.rho = StepFunction{{0.0, 0.5, 1.0}, {2.0, 0.0}};
  other.direction = Dir::Forward;

  ForwardProblem p = forward_problem(basis, run_w);
  std::vector<double> xi{1.0, -0.5};
  WienerEnsemble wiener(19, 4, 1, TimeGrid::make(1.0, 400));

  SimOptions all;
  all.store_paths = 4;
  ModeEnsemble ens = simulate_forward(p, xi, wiener, all);
  NonlocalAverage avg = nonlocal_average(ens, other);
  std::vector<double> exact = apply_M0(basis, other, xi);
  for (int k = 0; k < 2; ++k)
    CHECK(std::abs(avg.mean[k] - exact[k]) <= 2e-5 * (1.0 + std::abs(exact[k])));

  SimOptions none;
  none.store_paths = 0;
  ModeEnsemble bare = simulate_forward(p, xi, wiener, none);
  CHECK(nonlocal_average(bare, run_w).mean == nonlocal_average(ens, run_w).mean);
  CHECK_THROWS_AS(nonlocal_average(bare, other), SolverError);
}

TEST_CASE("single-path ensembles flag undefined standard errors") {
  SpectralBasis basis = laplace_basis(63, 2);
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Forward);
  ForwardProblem p = forward_problem(basis, w);
  std::vector<double> xi{1.0, 0.0};
  WienerEnsemble wiener(3, 1, 1, TimeGrid::make(1.0, 16));
  NonlocalAverage avg = nonlocal_average(simulate_forward(p, xi, wiener), w);
  CHECK_FALSE(avg.se_valid);
  CHECK(std::isnan(avg.se[0]));
}

TEST_CASE("path average drifts to the mean trajectory as paths grow") {
  SpectralBasis basis = laplace_basis(63, 2);
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Forward);
  ForwardProblem p = forward_problem(basis, w);
  ForwardNoise comp;
  comp.beta_nodes.assign(static_cast<size_t>(basis.grid.n_interior), 0.3);
  comp.h_modes.resize(2);
  comp.h_modes[0] = StepFunction::constant(0.5, 0.0, 1.0);
  p.noise.push_back(comp);
  std::vector<double> xi{1.0, -0.4};
  MeanTrajectory mean = mean_evolve(basis, xi, no_phi, TimeGrid::make(1.0, 100));
  for (int P : {1000, 10000}) {
    WienerEnsemble wiener(17, P, 1, TimeGrid::make(1.0, 100));
    SimOptions opts;
    opts.store_paths = 0;
    ModeEnsemble ens = simulate_forward(p, xi, wiener, opts);
    for (int k = 0; k < 2; ++k) {
      std::vector<double> terms(P);
      for (int path = 0; path < P; ++path) terms[path] = ens.terminal[static_cast<size_t>(path) * 2 + k];
      double gap = std::abs(mean_of(terms) - mean.at(k, 100));
      CHECK(gap <= 4.0 * std::sqrt(variance_of(terms) / P) + 1e-12);
    }
  }
}

TEST_CASE("the solution map is superposition-linear pathwise") {
  SpectralBasis basis = laplace_basis(63, 3);
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Forward);
  ForwardProblem base = forward_problem(basis, w);
  ForwardNoise comp;
  comp.beta_nodes.assign(static_cast<size_t>(basis.grid.n_interior), 0.25);
  base.noise.push_back(comp);

  ForwardProblem with_h = base;
  with_h.noise[0].h_modes.resize(3);
  with_h.noise[0].h_modes[1] = StepFunction::constant(0.7, 0.0, 1.0);
  std::vector<PiecewiseLinearFn> phi(3);
  phi[2] = PiecewiseLinearFn{{0.0, 1.0}, {0.4, -0.2}};
  with_h.phi_mean = phi;

  std::vector<double> xi1{1.0, 0.0, -0.5};
  std::vector<double> xi2{-0.2, 0.8, 0.1};
  std::vector<double> xi_sum{0.8, 0.8, -0.4};

  WienerEnsemble wiener(23, 32, 1, TimeGrid::make(1.0, 64));
  SimOptions opts;
  opts.store_paths = 0;
  // (xi1, 0 data) + (xi2, phi, h) against (xi1+xi2, phi, h) on shared noise
  ModeEnsemble a = simulate_forward(base, xi1, wiener, opts);
  ModeEnsemble b = simulate_forward(with_h, xi2, wiener, opts);
  ModeEnsemble c = simulate_forward(with_h, xi_sum, wiener, opts);
  for (int path = 0; path < 32; ++path)
    for (int k = 0; k < 3; ++k) {
      size_t idx = static_cast<size_t>(path) * 3 + k;
      CHECK(std::abs(a.terminal[idx] + b.terminal[idx] - c.terminal[idx]) <= 1e-12);
      CHECK(std::abs(a.condition_acc[idx] + b.condition_acc[idx] - c.condition_acc[idx]) <= 1e-12);
    }
}

TEST_CASE("spectral shift is undone by the exponential factor") {
  Grid1D grid = pi_grid(63);
  EllipticOperator op_plain = laplace_op(grid);
  EllipticOperator op_shift = laplace_op(grid, 0.0, 1.5);
  SpectralBasis plain = eigendecompose(op_plain, 2);
  SpectralBasis shifted = eigendecompose(op_shift, 2);
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Forward);

  ForwardProblem p1 = forward_problem(plain, w);
  p1.op = op_plain;
  ForwardProblem p2 = forward_problem(shifted, w);
  p2.op = op_shift;
  ForwardNoise comp;
  comp.beta_nodes.assign(static_cast<size_t>(grid.n_interior), 0.3);
  p1.noise.push_back(comp);
  p2.noise.push_back(comp);

  std::vector<double> xi{1.0, -0.6};
  WienerEnsemble wiener(9, 16, 1, TimeGrid::make(1.0, 128));
  SimOptions opts;
  opts.store_paths = 16;
  ModeEnsemble e1 = simulate_forward(p1, xi, wiener, opts);
  ModeEnsemble e2 = simulate_forward(p2, xi, wiener, opts);
  for (int path = 0; path < 16; ++path)
    for (int k = 0; k < 2; ++k) {
      auto y1 = e1.path_mode(path, k);
      auto y2 = e2.path_mode(path, k);
      for (int j = 0; j <= 128; j += 16) {
        double unshifted = y2[j] * std::exp(1.5 * wiener.grid().knot(j));
        CHECK(std::abs(unshifted - y1[j]) <= 1e-8 * (1.0 + std::abs(y1[j])));
      }
    }
}

TEST_CASE("full solve composes recovery, simulation and averaging") {
  SpectralBasis basis = laplace_basis(63, 3);
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Forward);
  ForwardProblem p = forward_problem(basis, w);

  SUBCASE("zero data yields the zero solution") {
    std::vector<double> mu(static_cast<size_t>(basis.grid.n_interior), 0.0);
    WienerEnsemble wiener(1, 4, 1, TimeGrid::make(1.0, 32));
    ForwardSolveResult res = solve_forward_nonlocal(mu, p, wiener);
    for (double v : res.recovery.xi) CHECK(v == 0.0);
    for (double v : res.ensemble.terminal) CHECK(v == 0.0);
    CHECK(res.recovery_residual <= 1e-14);
  }

  SUBCASE("scaling the observable scales the recovery") {
    std::vector<double> mu_modes{0.5, -0.2, 0.1};
    std::vector<double> mu = lift(apply_M0(basis, w, mu_modes), basis);
    std::vector<double> mu2(mu.size());
    for (size_t i = 0; i < mu.size(); ++i) mu2[i] = 2.0 * mu[i];
    WienerEnsemble wiener(1, 8, 1, TimeGrid::make(1.0, 32));
    ForwardSolveResult r1 = solve_forward_nonlocal(mu, p, wiener);
    ForwardSolveResult r2 = solve_forward_nonlocal(mu2, p, wiener);
    for (int k = 0; k < 3; ++k)
      CHECK(r2.recovery.xi[k] == doctest::Approx(2.0 * r1.recovery.xi[k]).epsilon(1e-12));
  }

  SUBCASE("noiseless pipeline closes the loop at quadrature accuracy") {
    std::vector<double> mu_modes{1.0, 0.3, -0.4};
    std::vector<double> mu = lift(apply_M0(basis, w, mu_modes), basis);
    WienerEnsemble wiener(1, 2, 1, TimeGrid::make(1.0, 1000));
    ForwardSolveResult res = solve_forward_nonlocal(mu, p, wiener);
    CHECK(res.recovery_residual <= 1e-6);
  }
}

TEST_CASE("random instances close the recovery loop exactly") {
  std::uint64_t state = 0x9e3779b97f4a7c15ull;
  auto next01 = [&]() {
    state ^= state << 13;
    state ^= state >> 7;
    state ^= state << 17;
    return static_cast<double>(state >> 11) * 0x1.0p-53;
  };
  SpectralBasis basis = laplace_basis(127, 5);
  for (int trial = 0; trial < 20; ++trial) {
    NonlocalWeight w;
    w.kappa = next01();
    w.horizon = 1.0;
    double split = 0.25 + 0.5 * next01();
    w.rho = StepFunction{{0.0, split, 1.0}, {0.2 + next01(), 0.2 + next01()}};
    w.direction = Dir::Forward;

    std::vector<double> xi_star(5);
    for (auto& v : xi_star) v = 2.0 * next01() - 1.0;
    std::vector<PiecewiseLinearFn> phi(5);
    for (auto& f : phi)
      f = PiecewiseLinearFn{{0.0, 0.5, 1.0}, {next01(), 2.0 * next01() - 1.0, next01()}};

    std::vector<double> mu_modes = apply_M0(basis, w, xi_star);
    std::vector<double> mphi = apply_M(basis, w, phi);
    for (int k = 0; k < 5; ++k) mu_modes[k] += mphi[k];
    RecoveryResult rec = recover_initial(lift(mu_modes, basis), phi, basis, w);
    for (int k = 0; k < 5; ++k)
      CHECK(std::abs(rec.xi[k] - xi_star[k]) <= 1e-10 * (1.0 + std::abs(xi_star[k])));
  }
}

TEST_CASE("worker count never changes a single bit of the output") {
  Grid1D g = pi_grid(63);
  SpectralBasis basis = eigendecompose(laplace_op(g), 4);
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Forward);
  ForwardProblem p = forward_problem(basis, w);
  ForwardNoise comp;
  comp.beta_nodes.assign(static_cast<size_t>(g.n_interior), 0.3);
  comp.h_modes.resize(4);
  comp.h_modes[2] = StepFunction::constant(0.5, 0.0, 1.0);
  p.noise.push_back(comp);
  std::vector<double> xi{1.0, -0.5, 0.2, 0.05};
  WienerEnsemble wiener(57, 200, 1, TimeGrid::make(1.0, 50));

  SimOptions ref;
  ref.workers = 0;  // serial reference
  ref.store_paths = 200;
  ModeEnsemble serial = simulate_forward(p, xi, wiener, ref);
  for (int workers : {1, 2, 8}) {
    SimOptions opts = ref;
    opts.workers = workers;
    ModeEnsemble par = simulate_forward(p, xi, wiener, opts);
    CHECK(par.condition_acc == serial.condition_acc);
    CHECK(par.terminal == serial.terminal);
    CHECK(par.traj == serial.traj);
  }
}

TEST_CASE("fluctuating sources are zero-mean and enter the dynamics") {
  SpectralBasis basis = laplace_basis(63, 1);
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Forward);
  ForwardProblem p = forward_problem(basis, w);
  p.noise.emplace_back();  // one silent component carrying the fluctuation
  p.phi_fluct.assign(1, std::vector<StepFunction>(1));
  p.phi_fluct[0][0] = StepFunction::constant(1.0, 0.0, 1.0);
  std::vector<double> xi{1.0};
  const int P = 10000;
  WienerEnsemble wiener(41, P, 1, TimeGrid::make(1.0, 100));
  SimOptions opts;
  opts.store_paths = 2;
  ModeEnsemble ens = simulate_forward(p, xi, wiener, opts);
  std::vector<double> terms(P);
  for (int path = 0; path < P; ++path) terms[path] = ens.terminal[static_cast<size_t>(path)];
  double target = std::exp(-basis.eigenvalues[0]);
  CHECK(std::abs(mean_of(terms) - target) <= 4.0 * std::sqrt(variance_of(terms) / P));
  CHECK(variance_of(terms) > 1e-4);  // the fluctuation really acts
}
