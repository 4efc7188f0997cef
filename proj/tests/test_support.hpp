#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "nlspde/backward.hpp"
#include "nlspde/forward.hpp"

namespace testsup {

inline constexpr double kPi = std::numbers::pi;

inline nlspde::Grid1D pi_grid(int n = 511) { return nlspde::Grid1D::make(kPi, n); }

inline nlspde::EllipticOperator laplace_op(const nlspde::Grid1D& grid, double a0 = 0.0,
                                           double shift = 0.0) {
  return nlspde::assemble_operator(
      grid, [](double) { return 1.0; }, [a0](double) { return a0; }, shift);
}

inline nlspde::SpectralBasis laplace_basis(int n = 511, int modes = 4) {
  nlspde::Grid1D g = pi_grid(n);
  return nlspde::eigendecompose(laplace_op(g), modes);
}

inline nlspde::NonlocalWeight const_weight(double kappa, double rho, double T,
                                           nlspde::NonlocalWeight::Direction dir) {
  nlspde::NonlocalWeight w;
  w.kappa = kappa;
  w.horizon = T;
  if (rho != 0.0 || T > 0.0) w.rho = nlspde::StepFunction::constant(rho, 0.0, T);
  if (T == 0.0) w.rho = nlspde::StepFunction::zero();
  w.direction = dir;
  return w;
}

// closed-form eigenvalues of the Dirichlet 3-point Laplacian on (0, L)
inline double tridiag_lambda(double L, int n, int k) {
  double h = L / (n + 1);
  double s = std::sin(0.5 * k * h * kPi / L);
  return 4.0 / (h * h) * s * s;
}

// composite Simpson quadrature (independent oracle for the exact
// exponential integrals)
inline double simpson(const std::function<double(double)>& f, double a, double b, int intervals) {
  if (intervals % 2 != 0) ++intervals;
  double h = (b - a) / intervals;
  double acc = f(a) + f(b);
  for (int i = 1; i < intervals; ++i) acc += f(a + i * h) * (i % 2 == 0 ? 2.0 : 4.0);
  return acc * h / 3.0;
}

// real orthonormal modes with prescribed decay rates, for examples that pin
// exact eigenvalues
inline nlspde::SpectralBasis synthetic_basis(const std::vector<double>& eigenvalues, int n = 63) {
  nlspde::SpectralBasis b = laplace_basis(n, static_cast<int>(eigenvalues.size()));
  b.eigenvalues = eigenvalues;
  return b;
}

inline nlspde::ForwardProblem forward_problem(const nlspde::SpectralBasis& basis,
                                              const nlspde::NonlocalWeight& w) {
  nlspde::ForwardProblem p;
  p.basis = basis;
  p.op = laplace_op(basis.grid);
  p.weight = w;
  p.theta = w.kappa == 0.0 ? w.horizon : 0.0;
  return p;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double variance_of(const std::vector<double>& v) {
  double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

}  // namespace testsup
