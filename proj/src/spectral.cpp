#include "nlspde/spectral.hpp"

#include <cmath>
#include <cstdint>
#include <limits>

namespace nlspde {

EllipticOperator assemble_operator(const Grid1D& grid,
                                   const std::function<double(double)>& a,
                                   const std::function<double(double)>& a0,
                                   double shift, double min_diffusion) {
  const int n = grid.n_interior;
  if (n < 3) throw ValidationError(ErrorKind::BadGrid, "need at least 3 interior nodes");
  const double h = grid.spacing;

  EllipticOperator op;
  op.grid = grid;
  op.shift = shift;
  op.a_mid.resize(static_cast<size_t>(n + 1));
  op.a0_node.resize(static_cast<size_t>(n));
  for (int i = 0; i <= n; ++i) {
    // midpoint between node i-1 and node i (nodes -1 and n are the ends)
    double xm = h * (static_cast<double>(i) + 0.5);
    double am = a(xm);
    if (!(am >= min_diffusion))
      throw ValidationError(ErrorKind::NonPositiveDiffusion,
                            "diffusion sample " + std::to_string(am) + " at x=" + std::to_string(xm) +
                                " below floor " + std::to_string(min_diffusion));
    op.a_mid[static_cast<size_t>(i)] = am;
  }
  for (int i = 0; i < n; ++i) op.a0_node[static_cast<size_t>(i)] = a0(grid.node(i));

  op.diag.resize(static_cast<size_t>(n));
  op.off.resize(static_cast<size_t>(n - 1));
  const double inv_h2 = 1.0 / (h * h);
  for (int i = 0; i < n; ++i) {
    double al = op.a_mid[static_cast<size_t>(i)];
    double ar = op.a_mid[static_cast<size_t>(i + 1)];
    op.diag[static_cast<size_t>(i)] = -(al + ar) * inv_h2 + op.a0_node[static_cast<size_t>(i)] - shift;
    if (i + 1 < n) op.off[static_cast<size_t>(i)] = ar * inv_h2;
  }
  return op;
}

namespace {

// Number of eigenvalues of the symmetric tridiagonal (diag, off) strictly
// below x, by the Sturm sequence count.
int sturm_count(std::span<const double> diag, std::span<const double> off, double x) {
  const size_t n = diag.size();
  int count = 0;
  double q = diag[0] - x;
  if (q < 0.0) ++count;
  for (size_t i = 1; i < n; ++i) {
    double e = off[i - 1];
    if (q == 0.0) q = 1e-300;  // guard the Sturm recurrence against an exact zero pivot
    q = diag[i] - x - e * e / q;
    if (q < 0.0) ++count;
  }
  return count;
}

// k-th smallest eigenvalue (0-based) by bisection, resolved to machine
// precision relative to the spectral bounds.
double bisect_eigenvalue(std::span<const double> diag, std::span<const double> off, int k,
                         double lo, double hi) {
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;  // interval at representable resolution
    if (sturm_count(diag, off, mid) > k)
      hi = mid;
    else
      lo = mid;
  }
  return 0.5 * (lo + hi);
}

// Deterministic pseudo-random start vector so inverse iteration never
// begins orthogonal to the target eigenvector.
double mix_index(std::uint64_t i) {
  std::uint64_t z = i + 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  z = z ^ (z >> 31);
  return static_cast<double>(z >> 11) * 0x1.0p-53 - 0.5;
}

// Solve (T - mu I) z = b for tridiagonal T with partial pivoting
// (the classic dgtsv-style sweep); T may be nearly singular at mu.
void shifted_tridiag_solve(std::span<const double> diag, std::span<const double> off, double mu,
                           std::vector<double>& z) {
  const size_t n = diag.size();
  std::vector<double> d(n), u1(n, 0.0), u2(n, 0.0), l(n, 0.0);
  std::vector<int> piv(n, 0);
  for (size_t i = 0; i < n; ++i) d[i] = diag[i] - mu;
  std::vector<double> sub(n, 0.0), sup(n, 0.0);
  for (size_t i = 0; i + 1 < n; ++i) sub[i + 1] = sup[i] = off[i];

  for (size_t i = 0; i + 1 < n; ++i) {
    if (std::abs(sub[i + 1]) > std::abs(d[i])) {
      piv[i] = 1;
      std::swap(d[i], sub[i + 1]);
      std::swap(sup[i], d[i + 1]);
      u2[i] = sup[i + 1];
      sup[i + 1] = 0.0;
      std::swap(z[i], z[i + 1]);
    }
    if (d[i] == 0.0) d[i] = 1e-300;
    double m = sub[i + 1] / d[i];
    l[i] = m;
    d[i + 1] -= m * sup[i];
    if (piv[i]) sup[i + 1] -= m * u2[i];
    z[i + 1] -= m * z[i];
    u1[i] = sup[i];
  }
  if (d[n - 1] == 0.0) d[n - 1] = 1e-300;
  // back substitution with the fill-in second superdiagonal
  z[n - 1] /= d[n - 1];
  if (n >= 2) {
    z[n - 2] = (z[n - 2] - u1[n - 2] * z[n - 1]) / d[n - 2];
    for (size_t ii = n - 1; ii-- > 1;) {
      size_t i = ii - 1;
      z[i] = (z[i] - u1[i] * z[i + 1] - u2[i] * z[i + 2]) / d[i];
    }
  }
}

}  // namespace

std::vector<double> tridiag_eigenvalues(std::span<const double> diag, std::span<const double> off,
                                        int count) {
  const size_t n = diag.size();
  // Gershgorin bounds
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < n; ++i) {
    double r = (i > 0 ? std::abs(off[i - 1]) : 0.0) + (i + 1 < n ? std::abs(off[i]) : 0.0);
    lo = std::min(lo, diag[i] - r);
    hi = std::max(hi, diag[i] + r);
  }
  double pad = 1e-10 * std::max(1.0, std::max(std::abs(lo), std::abs(hi)));
  lo -= pad;
  hi += pad;

  std::vector<double> eig(static_cast<size_t>(count));
  for (int k = 0; k < count; ++k) {
    // eigenvalue problem is A v = -lambda v: lambda_k ascending corresponds
    // to matrix eigenvalues descending, i.e. matrix index n-1-k from below
    int idx = static_cast<int>(n) - 1 - k;
    eig[static_cast<size_t>(k)] = -bisect_eigenvalue(diag, off, idx, lo, hi);
  }
  return eig;
}

SpectralBasis eigendecompose(const EllipticOperator& op, int mode_count) {
  const int n = op.grid.n_interior;
  if (mode_count < 1 || mode_count > n)
    throw ValidationError(ErrorKind::ShapeMismatch,
                          "mode count must lie in [1, n_interior=" + std::to_string(n) + "]");

  std::vector<double> lambdas = tridiag_eigenvalues(op.diag, op.off, mode_count);
  if (!(lambdas[0] > 0.0)) {
    if (op.shift == 0.0)
      throw SolverError(ErrorKind::NonPositiveSpectrum,
                        "lambda_1 = " + std::to_string(lambdas[0]) +
                            " <= 0; supply a spectral shift to restore positivity");
    throw SolverError(ErrorKind::NonPositiveSpectrum,
                      "lambda_1 = " + std::to_string(lambdas[0]) + " <= 0 even after shift " +
                          std::to_string(op.shift));
  }

  SpectralBasis basis;
  basis.grid = op.grid;
  basis.mode_count = mode_count;
  basis.shift = op.shift;
  basis.eigenvalues = lambdas;
  basis.modes.assign(static_cast<size_t>(mode_count) * static_cast<size_t>(n), 0.0);

  const double h = op.grid.spacing;
  double norm_T = 0.0;
  for (int i = 0; i < n; ++i) {
    double r = std::abs(op.diag[static_cast<size_t>(i)]);
    if (i > 0) r += std::abs(op.off[static_cast<size_t>(i - 1)]);
    if (i + 1 < n) r += std::abs(op.off[static_cast<size_t>(i)]);
    norm_T = std::max(norm_T, r);
  }
  // absolute residual floor: eps * ||T|| is the best double precision allows
  const double res_tol = 1e3 * std::numeric_limits<double>::epsilon() * norm_T;

  std::vector<double> z(static_cast<size_t>(n));
  for (int k = 0; k < mode_count; ++k) {
    const double mu = -lambdas[static_cast<size_t>(k)];  // matrix eigenvalue
    for (int i = 0; i < n; ++i) z[static_cast<size_t>(i)] = mix_index(static_cast<std::uint64_t>(i + 1));
    double res = std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < 6 && res > res_tol; ++iter) {
      shifted_tridiag_solve(op.diag, op.off, mu, z);
      double nrm = h_norm(z, h);
      if (!(nrm > 0.0) || !std::isfinite(nrm))
        throw SolverError(ErrorKind::EigensolveFailure, "inverse iteration collapsed for mode " +
                                                            std::to_string(k + 1));
      for (double& v : z) v /= nrm;
      double rnum = 0.0;
      for (int i = 0; i < n; ++i) {
        double av = op.diag[static_cast<size_t>(i)] * z[static_cast<size_t>(i)];
        if (i > 0) av += op.off[static_cast<size_t>(i - 1)] * z[static_cast<size_t>(i - 1)];
        if (i + 1 < n) av += op.off[static_cast<size_t>(i)] * z[static_cast<size_t>(i + 1)];
        double r = av + lambdas[static_cast<size_t>(k)] * z[static_cast<size_t>(i)];
        rnum += r * r;
      }
      res = std::sqrt(h * rnum);
    }
    if (!(res <= 1e3 * res_tol))
      throw SolverError(ErrorKind::EigensolveFailure,
                        "eigen-residual " + std::to_string(res) + " too large for mode " +
                            std::to_string(k + 1));

    // re-orthonormalize against the previous modes (modified Gram-Schmidt);
    // the spectrum of an unreduced symmetric tridiagonal is simple, so this
    // only trims rounding-level contamination
    auto row = [&](int kk) {
      return std::span<double>(basis.modes)
          .subspan(static_cast<size_t>(kk) * static_cast<size_t>(n), static_cast<size_t>(n));
    };
    for (int j = 0; j < k; ++j) {
      double c = h_inner(z, row(j), h);
      auto vj = row(j);
      for (int i = 0; i < n; ++i) z[static_cast<size_t>(i)] -= c * vj[static_cast<size_t>(i)];
    }
    double nrm = h_norm(z, h);
    if (!(nrm > 0.0))
      throw SolverError(ErrorKind::EigensolveFailure, "mode " + std::to_string(k + 1) +
                                                          " vanished during orthogonalization");
    for (double& v : z) v /= nrm;

    // sign convention: first component of noticeable size is positive
    double scale = 0.0;
    for (double v : z) scale = std::max(scale, std::abs(v));
    for (double v : z) {
      if (std::abs(v) > 1e-12 * scale) {
        if (v < 0.0)
          for (double& w : z) w = -w;
        break;
      }
    }
    std::copy(z.begin(), z.end(), basis.modes.begin() + static_cast<size_t>(k) * static_cast<size_t>(n));
  }
  return basis;
}

double choose_shift(const EllipticOperator& op, double floor) {
  std::vector<double> l1 = tridiag_eigenvalues(op.diag, op.off, 1);
  if (l1[0] >= floor) return 0.0;
  return floor - l1[0];
}

std::vector<double> project(std::span<const double> field, const SpectralBasis& basis) {
  const int n = basis.grid.n_interior;
  if (static_cast<int>(field.size()) != n)
    throw SolverError(ErrorKind::ShapeMismatch, "field size " + std::to_string(field.size()) +
                                                    " != grid size " + std::to_string(n));
  std::vector<double> coeffs(static_cast<size_t>(basis.mode_count));
  for (int k = 0; k < basis.mode_count; ++k)
    coeffs[static_cast<size_t>(k)] = h_inner(field, basis.mode(k), basis.grid.spacing);
  return coeffs;
}

std::vector<double> lift(std::span<const double> coeffs, const SpectralBasis& basis) {
  if (static_cast<int>(coeffs.size()) != basis.mode_count)
    throw SolverError(ErrorKind::ShapeMismatch, "coefficient count " + std::to_string(coeffs.size()) +
                                                    " != mode count " + std::to_string(basis.mode_count));
  const int n = basis.grid.n_interior;
  std::vector<double> field(static_cast<size_t>(n), 0.0);
  for (int k = 0; k < basis.mode_count; ++k) {
    auto vk = basis.mode(k);
    double c = coeffs[static_cast<size_t>(k)];
    for (int i = 0; i < n; ++i) field[static_cast<size_t>(i)] += c * vk[static_cast<size_t>(i)];
  }
  return field;
}

double h_inner(std::span<const double> u, std::span<const double> v, double h) {
  double s = 0.0;
  for (size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return h * s;
}

double h_norm(std::span<const double> field, double h) {
  return std::sqrt(h_inner(field, field, h));
}

}  // namespace nlspde
