#include "nlspde/verify.hpp"

#include <algorithm>
#include <cmath>

namespace nlspde {

double h1_norm(std::span<const double> field, double h) {
  double s0 = 0.0, s1 = 0.0;
  double prev = 0.0;
  for (size_t i = 0; i <= field.size(); ++i) {
    double cur = i < field.size() ? field[i] : 0.0;
    if (i < field.size()) s0 += cur * cur;
    double d = (cur - prev) / h;
    s1 += d * d;
    prev = cur;
  }
  return std::sqrt(h * (s0 + s1));
}

double h2_norm(std::span<const double> field, double h) {
  double s2 = 0.0;
  const size_t n = field.size();
  for (size_t i = 0; i < n; ++i) {
    double left = i > 0 ? field[i - 1] : 0.0;
    double right = i + 1 < n ? field[i + 1] : 0.0;
    double dd = (left - 2.0 * field[i] + right) / (h * h);
    s2 += dd * dd;
  }
  double base = h1_norm(field, h);
  return std::sqrt(base * base + h * s2);
}

double gram_deviation(const SpectralBasis& basis) {
  double worst = 0.0;
  for (int j = 0; j < basis.mode_count; ++j)
    for (int k = j; k < basis.mode_count; ++k) {
      double g = h_inner(basis.mode(j), basis.mode(k), basis.grid.spacing);
      worst = std::max(worst, std::abs(g - (j == k ? 1.0 : 0.0)));
    }
  return worst;
}

double max_eigen_residual(const EllipticOperator& op, const SpectralBasis& basis) {
  const int n = op.grid.n_interior;
  double worst = 0.0;
  for (int k = 0; k < basis.mode_count; ++k) {
    auto v = basis.mode(k);
    double lambda = basis.eigenvalues[static_cast<size_t>(k)];
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      double av = op.diag[static_cast<size_t>(i)] * v[static_cast<size_t>(i)];
      if (i > 0) av += op.off[static_cast<size_t>(i - 1)] * v[static_cast<size_t>(i - 1)];
      if (i + 1 < n) av += op.off[static_cast<size_t>(i)] * v[static_cast<size_t>(i + 1)];
      double r = av + lambda * v[static_cast<size_t>(i)];
      acc += r * r;
    }
    worst = std::max(worst, std::sqrt(op.grid.spacing * acc) / lambda);
  }
  return worst;
}

double forward_integral_residual(const ModeEnsemble& ens, const ForwardProblem& p) {
  if (ens.paths_stored == 0)
    throw SolverError(ErrorKind::ShapeMismatch, "residual check needs stored trajectories");
  ForwardStepData d = build_forward_step_data(p, ens.tgrid);
  if (d.modes != ens.modes)
    throw SolverError(ErrorKind::ShapeMismatch, "problem mode count != ensemble mode count");
  const int K = ens.modes, M = ens.tgrid.steps;
  const int N = d.components;
  WienerEnsemble wiener(ens.seed, ens.paths, ens.components, ens.tgrid);

  double worst = 0.0;
  std::vector<double> dw(static_cast<size_t>(ens.components) * static_cast<size_t>(M));
  std::vector<double> eta(static_cast<size_t>(K));
  std::vector<double> accum(static_cast<size_t>(K));
  for (int path = 0; path < ens.paths_stored; ++path) {
    wiener.path_increments(path, dw);
    std::fill(eta.begin(), eta.end(), 0.0);
    std::fill(accum.begin(), accum.end(), 0.0);
    for (int j = 0; j < M; ++j) {
      for (int k = 0; k < K; ++k) {
        auto y = ens.path_mode(path, k);
        double yj = y[static_cast<size_t>(j)];
        double noise_sum = 0.0;
        for (int c = 0; c < N; ++c) {
          double g = 0.0;
          if (d.has_b[static_cast<size_t>(c)]) {
            const double* row = d.bhat.data() + (static_cast<size_t>(c) * static_cast<size_t>(K) +
                                                 static_cast<size_t>(k)) *
                                                    static_cast<size_t>(K);
            for (int l = 0; l < K; ++l)
              g += row[l] * ens.path_mode(path, l)[static_cast<size_t>(j)];
          }
          if (d.has_h[static_cast<size_t>(c)])
            g += d.h_steps[(static_cast<size_t>(c) * static_cast<size_t>(K) + static_cast<size_t>(k)) *
                               static_cast<size_t>(M) +
                           static_cast<size_t>(j)];
          if (g != 0.0)
            noise_sum += g * dw[static_cast<size_t>(c) * static_cast<size_t>(M) + static_cast<size_t>(j)];
        }
        // integral form of the step: dy_j = (e^{-l dt}-1) y_j + e^{-l dt} G dw
        //                                   + S_j + eta_j * gain
        accum[static_cast<size_t>(k)] +=
            (d.decay[static_cast<size_t>(k)] - 1.0) * yj + d.decay[static_cast<size_t>(k)] * noise_sum +
            d.det_source[static_cast<size_t>(k) * static_cast<size_t>(M) + static_cast<size_t>(j)] +
            eta[static_cast<size_t>(k)] * d.eta_gain[static_cast<size_t>(k)];
        double defect = y[static_cast<size_t>(j + 1)] - y[0] - accum[static_cast<size_t>(k)];
        worst = std::max(worst, std::abs(defect));
      }
      for (int k = 0; k < K; ++k)
        for (int c = 0; c < N; ++c) {
          if (!d.has_fluct[static_cast<size_t>(c)]) continue;
          double g = d.fluct_steps[(static_cast<size_t>(c) * static_cast<size_t>(K) +
                                    static_cast<size_t>(k)) *
                                       static_cast<size_t>(M) +
                                   static_cast<size_t>(j)];
          if (g != 0.0)
            eta[static_cast<size_t>(k)] += g * dw[static_cast<size_t>(c) * static_cast<size_t>(M) +
                                                  static_cast<size_t>(j)];
        }
    }
  }
  return worst;
}

namespace {

struct BackwardCheckData {
  std::vector<double> beta_steps;  // N x M
  std::vector<double> phi_steps;   // K x M
};

BackwardCheckData sample_backward_tables(const BackwardSolution& sol, const BackwardProblem& p) {
  const int K = sol.modes, N = sol.components, M = sol.tgrid.steps;
  BackwardCheckData d;
  d.beta_steps.assign(static_cast<size_t>(N) * static_cast<size_t>(M), 0.0);
  for (size_t c = 0; c < p.beta_profiles.size() && c < static_cast<size_t>(N); ++c) {
    std::vector<double> s = sample_steps(p.beta_profiles[c], sol.tgrid);
    std::copy(s.begin(), s.end(), d.beta_steps.begin() + static_cast<long>(c) * M);
  }
  d.phi_steps.assign(static_cast<size_t>(K) * static_cast<size_t>(M), 0.0);
  for (size_t k = 0; k < p.phi_modes.size(); ++k) {
    if (p.phi_modes[k].empty()) continue;
    std::vector<double> s = sample_steps(p.phi_modes[k], sol.tgrid);
    std::copy(s.begin(), s.end(), d.phi_steps.begin() + static_cast<long>(k) * M);
  }
  return d;
}

}  // namespace

BackwardResiduals backward_integral_residual(const BackwardSolution& sol, const BackwardProblem& p) {
  if (sol.paths_stored == 0)
    throw SolverError(ErrorKind::ShapeMismatch, "residual check needs stored trajectories");
  const int K = sol.modes, N = sol.components, M = sol.tgrid.steps;
  const double dt = sol.tgrid.dt;
  BackwardCheckData tab = sample_backward_tables(sol, p);
  WienerEnsemble wiener(sol.seed, sol.paths, N, sol.tgrid);

  BackwardResiduals out;
  std::vector<double> dw(static_cast<size_t>(N) * static_cast<size_t>(M));
  std::vector<double> defect(static_cast<size_t>(M + 1));
  for (int path = 0; path < sol.paths_stored; ++path) {
    wiener.path_increments(path, dw);
    for (int k = 0; k < K; ++k) {
      double lambda = p.basis.eigenvalues[static_cast<size_t>(k)];
      auto y = sol.path_mode(path, k);
      const double grow = std::exp(lambda * dt);
      const double gain = dt * expm1_div(lambda * dt);

      // matched-quadrature identity:
      // y_{j+1} = e^{l dt} [ y_j + sum_d Ups_j (dw - beta dt) - phi_j dt p1 ]
      for (int j = 0; j < M; ++j) {
        double s = y[static_cast<size_t>(j)];
        for (int d = 0; d < N; ++d) {
          double ups = sol.upsilon_mode(d, k)[static_cast<size_t>(j)];
          if (ups != 0.0)
            s += ups * (dw[static_cast<size_t>(d) * static_cast<size_t>(M) + static_cast<size_t>(j)] -
                        tab.beta_steps[static_cast<size_t>(d) * static_cast<size_t>(M) + static_cast<size_t>(j)] * dt);
        }
        double c = tab.phi_steps[static_cast<size_t>(k) * static_cast<size_t>(M) + static_cast<size_t>(j)];
        if (c != 0.0) s -= c * gain;
        out.identity = std::max(out.identity, std::abs(y[static_cast<size_t>(j + 1)] - grow * s));
      }

      // left-endpoint integral form:
      // y_j = y_M + sum_{l>=j} [ (-l y_l + phi_l + sum beta Ups) dt - sum Ups dw ]
      double acc = 0.0;
      defect[static_cast<size_t>(M)] = 0.0;
      for (int j = M - 1; j >= 0; --j) {
        double drift = -lambda * y[static_cast<size_t>(j)] +
                       tab.phi_steps[static_cast<size_t>(k) * static_cast<size_t>(M) + static_cast<size_t>(j)];
        double mart = 0.0;
        for (int d = 0; d < N; ++d) {
          double ups = sol.upsilon_mode(d, k)[static_cast<size_t>(j)];
          if (ups != 0.0) {
            drift += tab.beta_steps[static_cast<size_t>(d) * static_cast<size_t>(M) + static_cast<size_t>(j)] * ups;
            mart += ups * dw[static_cast<size_t>(d) * static_cast<size_t>(M) + static_cast<size_t>(j)];
          }
        }
        acc += drift * dt - mart;
        defect[static_cast<size_t>(j)] = y[static_cast<size_t>(j)] - (y[static_cast<size_t>(M)] + acc);
        out.euler_form = std::max(out.euler_form, std::abs(defect[static_cast<size_t>(j)]));
      }
    }
  }
  return out;
}

double bsde_step_residual(const BackwardSolution& sol, const BackwardProblem& p) {
  if (sol.paths_stored == 0)
    throw SolverError(ErrorKind::ShapeMismatch, "residual check needs stored trajectories");
  const int K = sol.modes, N = sol.components, M = sol.tgrid.steps;
  const double dt = sol.tgrid.dt;
  BackwardCheckData tab = sample_backward_tables(sol, p);
  WienerEnsemble wiener(sol.seed, sol.paths, N, sol.tgrid);

  double total = 0.0;
  std::vector<double> dw(static_cast<size_t>(N) * static_cast<size_t>(M));
  for (int path = 0; path < sol.paths_stored; ++path) {
    wiener.path_increments(path, dw);
    double path_sum = 0.0;
    for (int j = 0; j < M; ++j) {
      double step2 = 0.0;
      for (int k = 0; k < K; ++k) {
        double lambda = p.basis.eigenvalues[static_cast<size_t>(k)];
        auto y = sol.path_mode(path, k);
        double drift = lambda * y[static_cast<size_t>(j)] -
                       tab.phi_steps[static_cast<size_t>(k) * static_cast<size_t>(M) + static_cast<size_t>(j)];
        double mart = 0.0;
        for (int d = 0; d < N; ++d) {
          double ups = sol.upsilon_mode(d, k)[static_cast<size_t>(j)];
          if (ups != 0.0) {
            drift -= tab.beta_steps[static_cast<size_t>(d) * static_cast<size_t>(M) + static_cast<size_t>(j)] * ups;
            mart += ups * dw[static_cast<size_t>(d) * static_cast<size_t>(M) + static_cast<size_t>(j)];
          }
        }
        double res = y[static_cast<size_t>(j + 1)] - y[static_cast<size_t>(j)] - drift * dt - mart;
        step2 += res * res;
      }
      path_sum += step2;
    }
    total += path_sum;
  }
  return std::sqrt(total / static_cast<double>(sol.paths_stored));
}

ConditioningTable conditioning_report(const SpectralBasis& basis, const NonlocalWeight& w) {
  ConditioningTable table;
  bool rho_zero = true;
  for (double v : w.rho.values)
    if (v > 0.0) rho_zero = false;
  table.exponential_growth = rho_zero && w.kappa > 0.0;
  for (int k = 0; k < basis.mode_count; ++k) {
    double lambda = basis.eigenvalues[static_cast<size_t>(k)];
    ConditioningRow row;
    row.mode = k + 1;
    row.lambda = lambda;
    row.multiplier = forward_multiplier(w, lambda);
    row.amplification = 1.0 / row.multiplier;
    row.q0 = w.horizon > 0.0 ? q_factor(w, lambda, 0.0) : 0.0;
    table.rows.push_back(row);
  }
  return table;
}

StabilityResult stability_probe(const std::function<std::vector<double>(const std::vector<double>&)>& solve,
                                const std::vector<double>& base_input, double rel_perturbation,
                                int trials, std::uint64_t seed) {
  StabilityResult res;
  if (rel_perturbation == 0.0) {
    res.skipped = true;
    return res;
  }
  auto norm2 = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  std::vector<double> base_out = solve(base_input);
  double in_norm = norm2(base_input);
  double out_norm = norm2(base_out);

  std::uint64_t state = seed;
  auto next_unit = [&]() {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    z = z ^ (z >> 31);
    return static_cast<double>(z >> 11) * 0x1.0p-52 - 1.0;  // (-1, 1)
  };

  for (int t = 0; t < trials; ++t) {
    std::vector<double> pert = base_input;
    std::vector<double> dir(base_input.size());
    for (auto& x : dir) x = next_unit();
    double dn = norm2(dir);
    if (dn == 0.0) continue;
    double scale = rel_perturbation * std::max(in_norm, 1e-300) / dn;
    for (size_t i = 0; i < pert.size(); ++i) pert[i] += scale * dir[i];
    std::vector<double> out = solve(pert);
    double dout = 0.0;
    for (size_t i = 0; i < out.size(); ++i) {
      double dlt = out[i] - base_out[i];
      dout += dlt * dlt;
    }
    double rel_out = std::sqrt(dout) / std::max(out_norm, 1e-300);
    double ratio = rel_out / rel_perturbation;
    res.ratios.push_back(ratio);
    res.max_ratio = std::max(res.max_ratio, ratio);
  }
  return res;
}

double semigroup_restart_forward(const ForwardProblem& p, std::span<const double> xi,
                                 const WienerEnsemble& wiener, double tau) {
  const int jt = wiener.grid().knot_index(tau);
  const int K = p.basis.mode_count;
  const int M = wiener.grid().steps;
  SimOptions opts;
  opts.store_paths = wiener.paths();
  ModeEnsemble full = simulate_forward(p, xi, wiener, opts);
  if (full.paths_stored < full.paths)
    throw SolverError(ErrorKind::ShapeMismatch, "restart check needs all trajectories stored");

  ForwardStepData d = build_forward_step_data(p, wiener.grid());
  double worst = 0.0;
  std::vector<double> dw(static_cast<size_t>(wiener.components()) * static_cast<size_t>(M));
  std::vector<double> y(static_cast<size_t>(K)), eta(static_cast<size_t>(K));
  for (int path = 0; path < full.paths; ++path) {
    wiener.path_increments(path, dw);
    // interface state at tau: the stored trajectory plus the fluctuation sums
    for (int k = 0; k < K; ++k) y[static_cast<size_t>(k)] = full.path_mode(path, k)[static_cast<size_t>(jt)];
    std::fill(eta.begin(), eta.end(), 0.0);
    for (int j = 0; j < jt; ++j)
      for (int k = 0; k < K; ++k)
        for (int c = 0; c < d.components; ++c) {
          if (!d.has_fluct[static_cast<size_t>(c)]) continue;
          double g = d.fluct_steps[(static_cast<size_t>(c) * static_cast<size_t>(K) + static_cast<size_t>(k)) *
                                       static_cast<size_t>(M) +
                                   static_cast<size_t>(j)];
          if (g != 0.0)
            eta[static_cast<size_t>(k)] += g * dw[static_cast<size_t>(c) * static_cast<size_t>(M) +
                                                  static_cast<size_t>(j)];
        }
    for (int j = jt; j < M; ++j) {
      forward_step_once(d, j, y, eta, dw, p.overflow_bound);
      for (int k = 0; k < K; ++k)
        worst = std::max(worst, std::abs(y[static_cast<size_t>(k)] -
                                         full.path_mode(path, k)[static_cast<size_t>(j + 1)]));
    }
  }
  return worst;
}

double semigroup_restart_backward(const RandomFieldRep& psi, const BackwardProblem& p,
                                  const WienerEnsemble& wiener, double tau) {
  const int jt = wiener.grid().knot_index(tau);
  const int K = p.basis.mode_count;
  const int M = wiener.grid().steps;
  const double T = wiener.grid().horizon;
  BackwardOptions opts;
  opts.store_paths = wiener.paths();
  BackwardSolution full = solve_backward_nonlocal(psi, p, wiener, opts);

  const int N = full.components;
  BackwardCheckData tab = sample_backward_tables(full, p);

  double worst = 0.0;
  std::vector<double> dw(static_cast<size_t>(wiener.components()) * static_cast<size_t>(M));
  std::vector<double> r(static_cast<size_t>(jt + 1));
  for (int path = 0; path < full.paths; ++path) {
    wiener.path_increments(path, dw);
    for (int k = 0; k < K; ++k) {
      double lambda = p.basis.eigenvalues[static_cast<size_t>(k)];
      auto yfull = full.path_mode(path, k);
      const double* yphi = full.y_phi.data() + static_cast<size_t>(k) * static_cast<size_t>(M + 1);
      const double carry = std::exp(-lambda * (T - tau));

      auto beta_coupling = [&](int j) {
        double s = 0.0;
        for (int d = 0; d < N; ++d)
          s += full.yhat(k, d)[static_cast<size_t>(j)] *
               tab.beta_steps[static_cast<size_t>(d) * static_cast<size_t>(M) + static_cast<size_t>(j)];
        return s * wiener.grid().dt;
      };

      // coupling suffix below tau, and its tail on [tau, T)
      r[static_cast<size_t>(jt)] = 0.0;
      for (int j = jt - 1; j >= 0; --j) r[static_cast<size_t>(j)] = r[static_cast<size_t>(j + 1)] + beta_coupling(j);
      double r_tail = 0.0;
      for (int j = M - 1; j >= jt; --j) r_tail += beta_coupling(j);

      // interface representation over [0, tau]: the sub-problem terminal
      // mean folds in the tail coupling and the tail source value; the
      // integrands are the full ones scaled by e^{-lambda (T - tau)}
      double mean_interface = carry * (full.ybar[static_cast<size_t>(k)] + r_tail) + yphi[jt];

      double sums = 0.0;
      for (int j = 0; j <= jt; ++j) {
        double decay = std::exp(-lambda * (tau - wiener.grid().knot(j)));
        double yphi_sub = yphi[j] - decay * yphi[jt];  // source restricted to [t_j, tau]
        double yj = decay * (mean_interface + sums + carry * r[static_cast<size_t>(j)]) + yphi_sub;
        worst = std::max(worst, std::abs(yj - yfull[static_cast<size_t>(j)]));
        if (j < jt)
          for (int d = 0; d < N; ++d) {
            double v = carry * full.yhat(k, d)[static_cast<size_t>(j)];
            if (v != 0.0)
              sums += v * dw[static_cast<size_t>(d) * static_cast<size_t>(M) + static_cast<size_t>(j)];
          }
      }
    }
  }
  return worst;
}

}  // namespace nlspde
