#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "nlspde/backward.hpp"
#include "nlspde/verify.hpp"
#include "test_support.hpp"

using namespace nlspde;
using namespace testsup;
using Dir = NonlocalWeight::Direction;

namespace {

BackwardProblem backward_problem(const SpectralBasis& basis, const NonlocalWeight& w, double eps) {
  BackwardProblem p;
  p.basis = basis;
  p.weight = w;
  p.epsilon = eps;
  p.theta = w.kappa == 0.0 ? 0.0 : w.horizon;
  return p;
}

RandomFieldRep rep_for(int modes) {
  RandomFieldRep r;
  r.entries.resize(static_cast<size_t>(modes));
  return r;
}

}  // namespace

TEST_CASE("terminal mean level inverts the backward denominator") {
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Backward);
  CHECK(mean_level(w, 1.0, 1.0) == doctest::Approx(1.5819767068693265).epsilon(1e-14));
  CHECK(mean_level(w, 3.7, 0.0) == 0.0);
  NonlocalWeight id = const_weight(1.0, 0.0, 0.0, Dir::Backward);
  CHECK(mean_level(id, 5.0, -2.5) == doctest::Approx(-2.5).epsilon(1e-15));
}

TEST_CASE("integrand transform divides by q at the left knots") {
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Backward);
  TimeGrid tg = TimeGrid::make(1.0, 20);  // dt = 0.05

  SUBCASE("zero in, zero out") {
    StepFunction zero = StepFunction::constant(0.0, 0.0, 0.5);
    std::vector<double> y = integrand_transform(w, 1.0, zero, 0.25, tg);
    for (double v : y) CHECK(v == 0.0);
  }

  SUBCASE("unit integrand on the half interval") {
    StepFunction g = StepFunction::constant(1.0, 0.0, 0.5);
    double bound = 0.0;
    std::vector<double> y = integrand_transform(w, 1.0, g, 0.25, tg, &bound);
    CHECK(y[0] == doctest::Approx(1.5819767068693265).epsilon(1e-14));
    CHECK(y[9] == doctest::Approx(2.3637857269355886).epsilon(1e-14));  // t_9 = 0.45
    for (int j = 10; j < 20; ++j) CHECK(y[j] == 0.0);
    CHECK(bound >= 2.3637857269355886);
  }

  SUBCASE("transform is homogeneous of degree one") {
    StepFunction g{{0.0, 0.25, 0.5}, {0.6, -0.2}};
    StepFunction g2{{0.0, 0.25, 0.5}, {1.2, -0.4}};
    std::vector<double> a = integrand_transform(w, 2.0, g, 0.25, tg);
    std::vector<double> b = integrand_transform(w, 2.0, g2, 0.25, tg);
    for (size_t j = 0; j < a.size(); ++j) CHECK(b[j] == doctest::Approx(2.0 * a[j]).epsilon(1e-15));
  }

  SUBCASE("support past the margin is rejected") {
    StepFunction late = StepFunction::constant(1.0, 0.0, 0.9);
    CHECK_THROWS_AS(integrand_transform(w, 1.0, late, 0.25, tg), SolverError);
  }

  SUBCASE("vanishing q with live integrand is flagged ill-posed") {
    NonlocalWeight cauchy = const_weight(1.0, 0.0, 1.0, Dir::Backward);
    StepFunction g = StepFunction::constant(1.0, 0.0, 0.5);
    CHECK_THROWS_AS(integrand_transform(cauchy, 1.0, g, 0.25, tg), SolverError);
  }
}

TEST_CASE("terminal reconstruction from the representation") {
  TimeGrid tg = TimeGrid::make(1.0, 50);

  SUBCASE("no integrands reproduce the mean on every path") {
    WienerEnsemble wiener(7, 32, 1, tg);
    std::vector<double> yhat(50, 0.0);
    std::vector<double> alpha = reconstruct_terminal(0.8, yhat, wiener);
    for (double a : alpha) CHECK(a == 0.8);
  }

  SUBCASE("unit integrand telescopes to the endpoint value") {
    WienerEnsemble wiener(7, 16, 1, tg);
    std::vector<double> yhat(50, 1.0);
    std::vector<double> alpha = reconstruct_terminal(0.0, yhat, wiener);
    for (int p = 0; p < 16; ++p) {
      std::vector<double> dw = wiener.path_increments(p);
      double wT = 0.0;
      for (double x : dw) wT += x;
      CHECK(alpha[p] == doctest::Approx(wT).epsilon(1e-15));
    }
  }

  SUBCASE("sample variance obeys the isometry") {
    const int P = 100000;
    WienerEnsemble wiener(1402, P, 1, tg);
    std::vector<double> yhat(50, 0.0);
    for (int j = 0; j < 25; ++j) yhat[j] = 1.3;
    std::vector<double> alpha = reconstruct_terminal(0.4, yhat, wiener);
    double target = 1.3 * 1.3 * 0.5;
    double se = target * std::sqrt(2.0 / (P - 1));
    CHECK(std::abs(mean_of(alpha) - 0.4) <= 4.0 * std::sqrt(target / P));
    CHECK(std::abs(variance_of(alpha) - target) <= 3.0 * se);
  }
}

TEST_CASE("mode process reduces to plain decay without noise data") {
  TimeGrid tg = TimeGrid::make(1.0, 40);
  WienerEnsemble wiener(9, 4, 1, tg);
  std::vector<double> yhat(40, 0.0), beta(40, 0.0);
  std::vector<double> y(41), ups(41);
  for (int p = 0; p < 4; ++p) {
    std::vector<double> dw = wiener.path_increments(p);
    mode_process_path(2.0, 1.5, yhat, beta, dw, tg, y, ups);
    for (int j = 0; j <= 40; ++j) {
      CHECK(y[j] == doctest::Approx(1.5 * std::exp(-2.0 * (1.0 - tg.knot(j)))).epsilon(1e-14));
      CHECK(ups[j] == 0.0);
    }
  }
}

TEST_CASE("mode process hits its terminal sample exactly") {
  TimeGrid tg = TimeGrid::make(1.0, 25);
  WienerEnsemble wiener(31, 8, 2, tg);
  std::vector<double> yhat(2 * 25, 0.0);
  for (int j = 0; j < 15; ++j) {
    yhat[j] = 0.7;
    yhat[25 + j] = -0.4;
  }
  std::vector<double> beta(2 * 25, 0.25);
  std::vector<double> y(26), ups(2 * 26);
  for (int p = 0; p < 8; ++p) {
    std::vector<double> dw = wiener.path_increments(p);
    mode_process_path(1.2, 0.9, yhat, beta, dw, tg, y, ups);
    double alpha = 0.9;
    for (int j = 0; j < 25; ++j)
      for (int d = 0; d < 2; ++d) {
        double v = yhat[d * 25 + j];
        if (v != 0.0) alpha += v * dw[d * 25 + j];
      }
    CHECK(std::abs(y[25] - alpha) <= 1e-12 * (1.0 + std::abs(alpha)));
  }
}

TEST_CASE("source component integrates the backward variation of constants") {
  TimeGrid tg = TimeGrid::make(1.0, 50);

  SUBCASE("zero source, zero response") {
    std::vector<double> y = source_component(StepFunction::zero(), 2.0, tg);
    for (double v : y) CHECK(v == 0.0);
  }

  SUBCASE("constant source closed form") {
    const double c = 1.7;
    std::vector<double> y = source_component(StepFunction::constant(c, 0.0, 1.0), 1.0, tg);
    CHECK(y[0] == doctest::Approx(c * (1.0 - std::exp(-1.0))).epsilon(1e-13));
    for (int j = 0; j <= 50; j += 10)
      CHECK(y[j] == doctest::Approx(c * (1.0 - std::exp(-(1.0 - tg.knot(j))))).epsilon(1e-13));
  }

  SUBCASE("response after the onset ignores earlier values") {
    StepFunction a{{0.0, 0.5, 1.0}, {0.0, 2.0}};
    StepFunction b{{0.0, 0.5, 1.0}, {3.0, 2.0}};
    std::vector<double> ya = source_component(a, 1.5, tg);
    std::vector<double> yb = source_component(b, 1.5, tg);
    for (int j = 25; j <= 50; ++j) CHECK(ya[j] == yb[j]);
    CHECK(ya[0] != yb[0]);
  }

  SUBCASE("weighted condition value matches brute-force quadrature") {
    NonlocalWeight w;
    w.kappa = 0.3;
    w.horizon = 1.0;
    w.rho = StepFunction{{0.0, 0.4, 1.0}, {0.8, 1.6}};
    w.direction = Dir::Backward;
    StepFunction phi{{0.0, 0.5, 1.0}, {0.0, 2.0}};
    double lambda = 2.2;
    // split every quadrature at the source jump (0.5) and the weight jump
    // (0.4); the source is 0 below the jump and 2 above, written explicitly
    // so no integrand ever samples the jump point from the wrong side
    auto yphi = [&](double t) {
      auto decay = [&](double s) { return std::exp(-lambda * (s - t)); };
      double lo = std::max(t, 0.5);
      return 2.0 * simpson(decay, lo, 1.0, 4000);
    };
    double oracle = 0.3 * yphi(0.0) + 0.8 * simpson(yphi, 0.0, 0.4, 400) +
                    1.6 * simpson(yphi, 0.4, 0.5, 200) + 1.6 * simpson(yphi, 0.5, 1.0, 400);
    CHECK(source_condition_value(phi, lambda, w) == doctest::Approx(oracle).epsilon(1e-8));
  }
}

TEST_CASE("zero observable gives the zero backward solution") {
  SpectralBasis basis = laplace_basis(63, 3);
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Backward);
  BackwardProblem p = backward_problem(basis, w, 0.25);
  WienerEnsemble wiener(3, 8, 1, TimeGrid::make(1.0, 32));
  BackwardSolution sol = solve_backward_nonlocal(rep_for(3), p, wiener);
  for (double a : sol.alpha) CHECK(a == 0.0);
  for (double u : sol.upsilon) CHECK(u == 0.0);
  for (double y : sol.y) CHECK(y == 0.0);
}

TEST_CASE("deterministic single mode closes the condition") {
  SpectralBasis basis = synthetic_basis({2.0});
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Backward);
  BackwardProblem p = backward_problem(basis, w, 0.25);
  RandomFieldRep psi = rep_for(1);
  psi.entries[0].mean = 1.0;
  const int M = 1000;
  WienerEnsemble wiener(3, 4, 1, TimeGrid::make(1.0, M));
  BackwardSolution sol = solve_backward_nonlocal(psi, p, wiener);

  double q0 = q_factor(w, 2.0, 0.0);
  CHECK(sol.ybar[0] == doctest::Approx(1.0 / q0).epsilon(1e-13));
  for (int path = 0; path < std::min(4, sol.paths_stored); ++path) {
    auto y = sol.path_mode(path, 0);
    for (int j = 0; j <= M; j += 100)
      CHECK(y[j] ==
            doctest::Approx(std::exp(-2.0 * (1.0 - wiener.grid().knot(j))) / q0).epsilon(1e-12));
  }
  // left-endpoint quadrature of the condition approaches 1 at rate dt
  for (double r : sol.condition_residual) CHECK(r <= 5e-3);
}

TEST_CASE("representation round trip is exact, with and without noise coupling") {
  SpectralBasis basis = synthetic_basis({1.0, 3.5, 7.0});
  NonlocalWeight w;
  w.kappa = 0.2;
  w.horizon = 1.0;
  w.rho = StepFunction{{0.0, 0.5, 1.0}, {0.7, 1.4}};
  w.direction = Dir::Backward;

  for (double beta_level : {0.0, 0.35}) {
    CAPTURE(beta_level);
    BackwardProblem p = backward_problem(basis, w, 0.25);
    p.theta = 1.0;
    if (beta_level != 0.0) p.beta_profiles.push_back(StepFunction::constant(beta_level, 0.0, 1.0));
    // a source that is legal for kappa != 0 (zero before theta... theta = T
    // means the source must vanish everywhere before T, so omit it here)
    TimeGrid tg = TimeGrid::make(1.0, 400);
    WienerEnsemble wiener(99, 64, 1, tg);

    RandomFieldRep alpha = rep_for(3);
    alpha.entries[0].mean = 1.0;
    alpha.entries[1].mean = -0.6;
    alpha.entries[2].mean = 0.15;
    alpha.entries[0].integrands.push_back(StepFunction{{0.0, 0.25, 0.75}, {0.8, -0.3}});
    alpha.entries[2].integrands.push_back(StepFunction::constant(0.5, 0.0, 0.5));

    BackwardSolution generated = backward_cauchy(alpha, p, wiener);
    RandomFieldRep psi = condition_representation(alpha, p, tg);
    BackwardSolution recovered = solve_backward_nonlocal(psi, p, wiener);

    for (int k = 0; k < 3; ++k)
      CHECK(std::abs(recovered.ybar[k] - alpha.entries[k].mean) <= 1e-10);
    for (size_t i = 0; i < generated.alpha.size(); ++i)
      CHECK(std::abs(generated.alpha[i] - recovered.alpha[i]) <= 1e-10);
    // the pathwise condition holds at quadrature accuracy even with coupling
    for (double r : recovered.condition_residual) CHECK(r <= 8e-3);
    if (beta_level != 0.0) {
      bool any_shift = false;
      for (double d : recovered.det_shift) any_shift = any_shift || d != 0.0;
      CHECK(any_shift);
    }
  }
}

TEST_CASE("condition residual shrinks at first order in dt") {
  SpectralBasis basis = synthetic_basis({1.0, 4.0});
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Backward);
  RandomFieldRep psi = rep_for(2);
  psi.entries[0].mean = 1.0;
  psi.entries[0].integrands.push_back(StepFunction::constant(0.6, 0.0, 0.5));
  psi.entries[1].mean = -0.4;

  double prev = 0.0;
  for (int pass = 0; pass < 2; ++pass) {
    int M = pass == 0 ? 200 : 800;
    BackwardProblem p = backward_problem(basis, w, 0.25);
    WienerEnsemble wiener(12, 128, 1, TimeGrid::make(1.0, M));
    BackwardSolution sol = solve_backward_nonlocal(psi, p, wiener);
    double worst = 0.0;
    for (double r : sol.condition_residual) worst = std::max(worst, r);
    if (pass == 1) CHECK(prev / worst >= 1.8);
    prev = worst;
  }
}

TEST_CASE("upsilon vanishes on the measurability margin") {
  SpectralBasis basis = synthetic_basis({1.0, 2.0});
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Backward);
  BackwardProblem p = backward_problem(basis, w, 0.25);
  RandomFieldRep psi = rep_for(2);
  psi.entries[0].mean = 0.3;
  psi.entries[0].integrands.push_back(StepFunction::constant(1.0, 0.0, 0.75));
  psi.entries[1].integrands.push_back(StepFunction::constant(-0.5, 0.0, 0.5));
  TimeGrid tg = TimeGrid::make(1.0, 100);
  WienerEnsemble wiener(6, 16, 1, tg);
  BackwardSolution sol = solve_backward_nonlocal(psi, p, wiener);
  int j_eps = tg.knot_index(0.75);
  for (int d = 0; d < sol.components; ++d)
    for (int k = 0; k < 2; ++k) {
      auto u = sol.upsilon_mode(d, k);
      for (int j = j_eps; j <= 100; ++j) CHECK(u[j] == 0.0);
      if (k == 0 && d == 0)
        for (int j = 0; j < j_eps; ++j) CHECK(u[j] != 0.0);
    }
}

TEST_CASE("BSDE residual decays under time refinement with live coupling") {
  SpectralBasis basis = synthetic_basis({2.0});
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Backward);
  RandomFieldRep psi = rep_for(1);
  psi.entries[0].mean = 0.8;
  psi.entries[0].integrands.push_back(StepFunction::constant(0.7, 0.0, 0.75));

  double res_coarse = 0.0;
  for (int pass = 0; pass < 2; ++pass) {
    int M = pass == 0 ? 100 : 400;
    BackwardProblem p = backward_problem(basis, w, 0.25);
    p.beta_profiles.push_back(StepFunction::constant(0.3, 0.0, 1.0));
    WienerEnsemble wiener(4, 256, 1, TimeGrid::make(1.0, M));
    BackwardOptions opts;
    opts.store_paths = 256;
    BackwardSolution sol = solve_backward_nonlocal(psi, p, wiener, opts);
    double res = bsde_step_residual(sol, p);
    if (pass == 1) CHECK(res_coarse / res >= 1.8);
    res_coarse = res;
  }
}

TEST_CASE("terminal map sends deterministic data to decayed coefficients") {
  SpectralBasis basis = synthetic_basis({1.0, 4.0, 9.0});
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Backward);
  BackwardProblem p = backward_problem(basis, w, 0.25);
  RandomFieldRep alpha = rep_for(3);
  alpha.entries[0].mean = 2.0;
  alpha.entries[1].mean = -1.0;
  alpha.entries[2].mean = 0.5;
  WienerEnsemble wiener(15, 4, 1, TimeGrid::make(1.0, 64));
  BackwardSolution sol = backward_cauchy(alpha, p, wiener);
  for (int k = 0; k < 3; ++k) {
    auto y = sol.path_mode(0, k);
    CHECK(y[0] ==
          doctest::Approx(std::exp(-basis.eigenvalues[k]) * alpha.entries[k].mean).epsilon(1e-13));
  }
}

TEST_CASE("terminal-to-initial map is linear and bounded by the kernel moment") {
  SpectralBasis basis = synthetic_basis({1.0, 4.0});
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Backward);
  BackwardProblem p = backward_problem(basis, w, 0.25);
  p.beta_profiles.push_back(StepFunction::constant(0.4, 0.0, 1.0));
  TimeGrid tg = TimeGrid::make(1.0, 128);
  const int P = 20000;
  WienerEnsemble wiener(1999, P, 1, tg);

  RandomFieldRep a1 = rep_for(2);
  a1.entries[0].mean = 1.0;
  a1.entries[0].integrands.push_back(StepFunction::constant(0.9, 0.0, 0.5));
  a1.entries[1].mean = -0.5;

  RandomFieldRep a3 = rep_for(2);
  a3.entries[0].mean = 3.0;
  a3.entries[0].integrands.push_back(StepFunction::constant(2.7, 0.0, 0.5));
  a3.entries[1].mean = -1.5;

  BackwardOptions opts;
  opts.store_paths = 4;
  BackwardSolution s1 = backward_cauchy(a1, p, wiener, opts);
  BackwardSolution s3 = backward_cauchy(a3, p, wiener, opts);
  for (int k = 0; k < 2; ++k) {
    auto y1 = s1.path_mode(0, k);
    auto y3 = s3.path_mode(0, k);
    for (int j = 0; j <= 128; j += 16)
      CHECK(y3[j] == doctest::Approx(3.0 * y1[j]).epsilon(1e-12));
  }

  // [E y(0)]^2 <= c_F e^{-2 lambda T} E alpha^2, the decay-weighted moment
  std::vector<double> beta_steps(128, 0.4);
  double cF = kernel_cF(beta_steps, tg);
  for (int k = 0; k < 2; ++k) {
    double e_alpha2 = 0.0;
    for (int path = 0; path < P; ++path) {
      double a = s1.alpha[static_cast<size_t>(path) * 2 + k];
      e_alpha2 += a * a;
    }
    e_alpha2 /= P;
    double y0 = s1.path_mode(0, k)[0];  // deterministic across paths
    double bound = cF * std::exp(-2.0 * basis.eigenvalues[k]) * e_alpha2;
    CHECK(y0 * y0 <= bound * 1.05);
  }
}

TEST_CASE("degenerate terminal weight amplifies exponentially under the override") {
  SpectralBasis basis = synthetic_basis({1.0, 3.0});
  NonlocalWeight cauchy = const_weight(1.0, 0.0, 1.0, Dir::Backward);
  BackwardProblem p = backward_problem(basis, cauchy, 0.25);
  p.theta = 1.0;
  RandomFieldRep psi = rep_for(2);
  psi.entries[0].mean = 0.5;
  psi.entries[1].mean = -0.125;
  WienerEnsemble wiener(8, 64, 1, TimeGrid::make(1.0, 64));
  CHECK_THROWS_AS(solve_backward_nonlocal(psi, p, wiener), ValidationError);
  BackwardOptions opts;
  opts.allow_ill_posed = true;
  BackwardSolution sol = solve_backward_nonlocal(psi, p, wiener, opts);
  std::vector<double> mean_alpha(2, 0.0);
  for (int path = 0; path < 64; ++path)
    for (int k = 0; k < 2; ++k) mean_alpha[k] += sol.alpha[static_cast<size_t>(path) * 2 + k];
  for (int k = 0; k < 2; ++k) {
    mean_alpha[k] /= 64.0;
    double expected = std::exp(basis.eigenvalues[k]) * psi.entries[k].mean;
    CHECK(std::abs(mean_alpha[k] - expected) <= 1e-10 * std::abs(expected));
  }
}

TEST_CASE("source before the onset is rejected when kappa is live") {
  SpectralBasis basis = synthetic_basis({1.0});
  NonlocalWeight w = const_weight(0.5, 1.0, 1.0, Dir::Backward);
  BackwardProblem p = backward_problem(basis, w, 0.25);
  p.theta = 0.5;
  p.phi_modes.resize(1);
  p.phi_modes[0] = StepFunction::constant(1.0, 0.0, 1.0);  // live on [0, 0.5)
  RandomFieldRep psi = rep_for(1);
  psi.entries[0].mean = 1.0;
  WienerEnsemble wiener(2, 4, 1, TimeGrid::make(1.0, 32));
  CHECK_THROWS_AS(solve_backward_nonlocal(psi, p, wiener), SolverError);
  p.phi_modes[0] = StepFunction{{0.0, 0.5, 1.0}, {0.0, 1.0}};  // legal: onset at theta
  BackwardSolution sol = solve_backward_nonlocal(psi, p, wiener);
  CHECK(sol.psi_phi[0] != 0.0);
}

TEST_CASE("sources superpose with the noise part in the condition") {
  SpectralBasis basis = synthetic_basis({1.5});
  NonlocalWeight w = const_weight(0.0, 1.0, 1.0, Dir::Backward);
  BackwardProblem p = backward_problem(basis, w, 0.25);
  p.phi_modes.resize(1);
  p.phi_modes[0] = StepFunction{{0.0, 0.25, 1.0}, {0.4, -0.8}};
  RandomFieldRep psi = rep_for(1);
  psi.entries[0].mean = 1.2;
  psi.entries[0].integrands.push_back(StepFunction::constant(0.5, 0.0, 0.5));
  WienerEnsemble wiener(44, 128, 1, TimeGrid::make(1.0, 1000));
  BackwardSolution sol = solve_backward_nonlocal(psi, p, wiener);
  for (double r : sol.condition_residual) CHECK(r <= 5e-3);
  CHECK(sol.psi_phi[0] != 0.0);
}
