#pragma once

#include <functional>
#include <span>
#include <vector>

#include "nlspde/grid.hpp"
#include "nlspde/piecewise.hpp"

namespace nlspde {

// Symmetric tridiagonal discretization of A v = (a v')' + a0 v on the
// interior nodes, Dirichlet ends, optionally shifted to A - r I.
// Row i:  (a_{i-1/2} u_{i-1} - (a_{i-1/2}+a_{i+1/2}) u_i + a_{i+1/2} u_{i+1})/h^2
//         + (a0_i - r) u_i
struct EllipticOperator {
  Grid1D grid;
  std::vector<double> diag;     // n entries
  std::vector<double> off;      // n-1 entries (super/sub diagonal)
  std::vector<double> a_mid;    // n+1 midpoint diffusion samples
  std::vector<double> a0_node;  // n zero-order samples
  double shift = 0.0;           // r
};

// Orthonormal eigenbasis of the discrete operator: A_h v_k = -lambda_k v_k,
// lambda_k ascending, <v_j, v_k>_h = delta_jk with <u,v>_h = h * sum u_i v_i.
struct SpectralBasis {
  Grid1D grid;
  int mode_count = 0;
  double shift = 0.0;
  std::vector<double> eigenvalues;  // K, ascending (include the shift)
  std::vector<double> modes;        // K x n, row-major

  std::span<const double> mode(int k) const {
    return std::span<const double>(modes).subspan(
        static_cast<size_t>(k) * static_cast<size_t>(grid.n_interior),
        static_cast<size_t>(grid.n_interior));
  }
};

EllipticOperator assemble_operator(const Grid1D& grid,
                                   const std::function<double(double)>& a,
                                   const std::function<double(double)>& a0,
                                   double shift,
                                   double min_diffusion = 1e-12);

inline EllipticOperator assemble_operator(const Grid1D& grid, const LinearTable& a,
                                          const LinearTable& a0, double shift,
                                          double min_diffusion = 1e-12) {
  return assemble_operator(
      grid, [&](double x) { return a(x); }, [&](double x) { return a0(x); }, shift, min_diffusion);
}

SpectralBasis eigendecompose(const EllipticOperator& op, int mode_count);

// Smallest shift r >= 0 such that the decomposed spectrum satisfies
// lambda_1 >= floor. Returns 0 when the unshifted operator already does.
double choose_shift(const EllipticOperator& op, double floor = 1e-6);

std::vector<double> project(std::span<const double> field, const SpectralBasis& basis);
std::vector<double> lift(std::span<const double> coeffs, const SpectralBasis& basis);

double h_norm(std::span<const double> field, double h);
double h_inner(std::span<const double> u, std::span<const double> v, double h);

// All eigenvalues of the assembled matrix negated (full spectrum helper for
// shift selection and tests).
std::vector<double> tridiag_eigenvalues(std::span<const double> diag, std::span<const double> off,
                                        int count);

}  // namespace nlspde
