#include "nlspde/backward.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "nlspde/parallel.hpp"

namespace nlspde {

int RandomFieldRep::components() const {
  size_t c = 0;
  for (const auto& e : entries) c = std::max(c, e.integrands.size());
  return static_cast<int>(c);
}

double RandomFieldRep::support_end() const {
  double s = 0.0;
  for (const auto& e : entries)
    for (const auto& g : e.integrands)
      if (!g.empty() && !g.is_zero()) s = std::max(s, g.support_end());
  return s;
}

double mean_level(const NonlocalWeight& w, double lambda, double mean_gamma) {
  return mean_gamma / backward_denominator(w, lambda);
}

std::vector<double> integrand_transform(const NonlocalWeight& w, double lambda,
                                        const StepFunction& gamma_hat, double epsilon,
                                        const TimeGrid& tgrid, double* bound_out) {
  if (!(epsilon > 0.0)) throw ValidationError(ErrorKind::BadConfig, "measurability margin must be positive");
  const double cutoff = w.horizon - epsilon;
  std::vector<double> g = sample_steps(gamma_hat, tgrid);
  std::vector<double> yhat(g.size(), 0.0);

  WeightReport wr = validate(w);
  double c_inf = wr.positivity_ok ? wr.ess_inf_window : 0.0;
  double bound = 0.0;

  for (int j = 0; j < tgrid.steps; ++j) {
    double gj = g[static_cast<size_t>(j)];
    if (gj == 0.0) continue;
    double tl = tgrid.knot(j);
    double tr = tgrid.knot(j + 1);
    if (tr > cutoff + 1e-12 * w.horizon)
      throw SolverError(ErrorKind::SupportViolation,
                        "integrand is nonzero on [" + std::to_string(tl) + ", " + std::to_string(tr) +
                            ") past T - epsilon = " + std::to_string(cutoff));
    double q = q_factor(w, lambda, tl);
    if (q == 0.0)
      throw SolverError(ErrorKind::IllPosedWeight,
                        "q vanishes at t = " + std::to_string(tl) + " where the integrand is nonzero");
    yhat[static_cast<size_t>(j)] = gj / q;
    if (c_inf > 0.0) {
      double denom = c_inf * (-std::expm1(-lambda * (w.horizon - tl)));
      bound = std::max(bound, lambda * std::abs(gj) / denom);
    } else {
      bound = std::numeric_limits<double>::infinity();
    }
  }
  if (bound_out != nullptr) *bound_out = bound;
  return yhat;
}

std::vector<double> reconstruct_terminal(double ybar, std::span<const double> yhat,
                                         const WienerEnsemble& wiener, int workers) {
  const int M = wiener.grid().steps;
  const int N = wiener.components();
  if (yhat.size() != static_cast<size_t>(N) * static_cast<size_t>(M))
    throw SolverError(ErrorKind::ShapeMismatch, "integrand buffer must be components x steps");
  std::vector<double> alpha(static_cast<size_t>(wiener.paths()), 0.0);
  parallel_for_indexed(wiener.paths(), workers, [&](int p) {
    std::vector<double> dw(yhat.size());
    wiener.path_increments(p, dw);
    double acc = ybar;
    for (int j = 0; j < M; ++j)
      for (int d = 0; d < N; ++d) {
        double v = yhat[static_cast<size_t>(d) * static_cast<size_t>(M) + static_cast<size_t>(j)];
        if (v != 0.0) acc += v * dw[static_cast<size_t>(d) * static_cast<size_t>(M) + static_cast<size_t>(j)];
      }
    alpha[static_cast<size_t>(p)] = acc;
  });
  return alpha;
}

namespace {

// suffix sums R_j = sum_d sum_{l >= j} yhat_dl beta_dl dt at the knots
std::vector<double> coupling_suffix(std::span<const double> yhat, std::span<const double> beta,
                                    const TimeGrid& tgrid) {
  const int M = tgrid.steps;
  const size_t comps = beta.empty() ? 0 : beta.size() / static_cast<size_t>(M);
  std::vector<double> r(static_cast<size_t>(M + 1), 0.0);
  for (int j = M - 1; j >= 0; --j) {
    double s = 0.0;
    for (size_t d = 0; d < comps; ++d)
      s += yhat[d * static_cast<size_t>(M) + static_cast<size_t>(j)] *
           beta[d * static_cast<size_t>(M) + static_cast<size_t>(j)];
    r[static_cast<size_t>(j)] = r[static_cast<size_t>(j + 1)] + s * tgrid.dt;
  }
  return r;
}

// int_0^T rho(t) e^{-lambda (T-t)} R(t) dt + kappa e^{-lambda T} R(0) for the
// piecewise-linear R spanned by the knots; exact per step.
double coupling_condition_shift(const NonlocalWeight& w, double lambda,
                                std::span<const double> r_knots, std::span<const double> rho_steps,
                                const TimeGrid& tgrid) {
  const int M = tgrid.steps;
  const double T = w.horizon;
  double acc = w.kappa * std::exp(-lambda * T) * r_knots[0];
  const double x = lambda * tgrid.dt;
  const double p1 = expm1_div(x);
  const double p2 = expm1_div2(x);
  for (int j = 0; j < M; ++j) {
    double rho = rho_steps[static_cast<size_t>(j)];
    if (rho == 0.0) continue;
    double rj = r_knots[static_cast<size_t>(j)];
    double rj1 = r_knots[static_cast<size_t>(j + 1)];
    if (rj == 0.0 && rj1 == 0.0) continue;
    double slope_back = (rj - rj1) / tgrid.dt;  // R(t_{j+1} - tau) = R_{j+1} + slope_back * tau
    double integral = tgrid.dt * (rj1 * p1 + slope_back * tgrid.dt * p2);
    acc += rho * std::exp(-lambda * (T - tgrid.knot(j + 1))) * integral;
  }
  return acc;
}

}  // namespace

void mode_process_path(double lambda, double ybar, std::span<const double> yhat,
                       std::span<const double> beta_steps, std::span<const double> dw,
                       const TimeGrid& tgrid, std::span<double> y_out, std::span<double> ups_out) {
  const int M = tgrid.steps;
  const size_t comps = yhat.size() / static_cast<size_t>(M);
  const double T = tgrid.horizon;
  std::vector<double> r = coupling_suffix(yhat, beta_steps, tgrid);

  double acc = ybar;
  for (int j = 0; j <= M; ++j) {
    double decay = std::exp(-lambda * (T - tgrid.knot(j)));
    y_out[static_cast<size_t>(j)] = decay * (acc + r[static_cast<size_t>(j)]);
    if (!ups_out.empty()) {
      for (size_t d = 0; d < comps; ++d)
        ups_out[d * static_cast<size_t>(M + 1) + static_cast<size_t>(j)] =
            j < M ? decay * yhat[d * static_cast<size_t>(M) + static_cast<size_t>(j)] : 0.0;
    }
    if (j < M) {
      for (size_t d = 0; d < comps; ++d) {
        double v = yhat[d * static_cast<size_t>(M) + static_cast<size_t>(j)];
        if (v != 0.0) acc += v * dw[d * static_cast<size_t>(M) + static_cast<size_t>(j)];
      }
    }
  }
}

std::vector<double> source_component(const StepFunction& phi_mode, double lambda, const TimeGrid& tgrid) {
  const int M = tgrid.steps;
  std::vector<double> y(static_cast<size_t>(M + 1), 0.0);
  if (phi_mode.empty() || phi_mode.is_zero()) return y;
  std::vector<double> c = sample_steps(phi_mode, tgrid);
  const double x = lambda * tgrid.dt;
  const double decay = std::exp(-x);
  const double gain = tgrid.dt * expm1_div(x);
  for (int j = M - 1; j >= 0; --j)
    y[static_cast<size_t>(j)] = c[static_cast<size_t>(j)] * gain + decay * y[static_cast<size_t>(j + 1)];
  return y;
}

double source_condition_value(const StepFunction& phi_mode, double lambda, const NonlocalWeight& w) {
  if (phi_mode.empty() || phi_mode.is_zero()) return 0.0;
  const double T = w.horizon;

  std::vector<double> cuts{0.0, T};
  for (double b : w.rho.breakpoints)
    if (b > 0.0 && b < T) cuts.push_back(b);
  for (double b : phi_mode.breakpoints)
    if (b > 0.0 && b < T) cuts.push_back(b);
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

  const size_t nseg = cuts.size() - 1;
  // march the exact solution backward: y(a) = c d p1 + e^{-lambda d} y(b)
  std::vector<double> y(cuts.size(), 0.0);
  for (size_t s = nseg; s-- > 0;) {
    double a = cuts[s], b = cuts[s + 1];
    double d = b - a;
    double c = phi_mode.value_at(0.5 * (a + b));
    y[s] = c * d * expm1_div(lambda * d) + std::exp(-lambda * d) * y[s + 1];
  }
  double acc = w.kappa * y[0];
  for (size_t s = 0; s < nseg; ++s) {
    double a = cuts[s], b = cuts[s + 1];
    double rho = w.rho.value_at(0.5 * (a + b));
    if (rho == 0.0) continue;
    double d = b - a;
    double c = phi_mode.value_at(0.5 * (a + b));
    // y(t) = c/lambda + (y(b) - c/lambda) e^{-lambda (b - t)} on the segment
    double integral = c * d / lambda + (y[s + 1] - c / lambda) * d * expm1_div(lambda * d);
    acc += rho * integral;
  }
  return acc;
}

namespace {

struct BackwardCore {
  int K = 0, N = 0, M = 0;
  TimeGrid tgrid;
  std::vector<double> lambdas;     // K
  std::vector<double> ybar;        // K
  std::vector<double> yhat;        // K x N x M
  std::vector<double> ghat;        // K x N x M (input integrands; condition check)
  std::vector<double> beta_steps;  // N x M
  std::vector<double> r_knots;     // K x (M+1)
  std::vector<double> y_phi;       // K x (M+1)
  std::vector<double> mean_gamma;  // K (only for the condition check)
  std::vector<double> rho_steps;   // M
  double kappa = 0.0;

  std::span<const double> yhat_mode(int k) const {
    return std::span<const double>(yhat).subspan(
        static_cast<size_t>(k) * static_cast<size_t>(N) * static_cast<size_t>(M),
        static_cast<size_t>(N) * static_cast<size_t>(M));
  }
};

void validate_backward_problem(const BackwardProblem& p, const BackwardOptions& opts,
                               std::vector<std::string>* warnings) {
  if (p.weight.direction != NonlocalWeight::Direction::Backward)
    throw ValidationError(ErrorKind::BadConfig, "backward problem needs a backward-direction weight");
  WeightReport wr = validate(p.weight);
  if (!wr.valid() && !opts.allow_ill_posed)
    throw ValidationError(ErrorKind::IllPosedWeight,
                          "weight rejected (" + wr.detail + "); pass allow_ill_posed to study it");

  const double T = p.weight.horizon;
  if (p.weight.kappa == 0.0) {
    if (p.theta != 0.0)
      throw ValidationError(ErrorKind::ThetaViolation, "kappa = 0 requires theta = 0");
  } else {
    if (!(p.theta > 0.0 && p.theta <= T))
      throw ValidationError(ErrorKind::ThetaViolation, "kappa != 0 requires theta in (0, T]");
    for (size_t k = 0; k < p.phi_modes.size(); ++k) {
      const StepFunction& f = p.phi_modes[k];
      if (f.empty() || f.is_zero()) continue;
      for (size_t j = 0; j < f.values.size(); ++j)
        if (f.values[j] != 0.0 && f.breakpoints[j] < p.theta - 1e-12 * std::max(1.0, T))
          throw SolverError(ErrorKind::ThetaViolation,
                            "source is nonzero before the onset time theta = " + std::to_string(p.theta));
    }
  }
  if (warnings != nullptr && wr.valid() && p.epsilon > 0.0 && wr.t1 > T - p.epsilon + 1e-12)
    warnings->push_back("rho positivity window starts at T1 = " + std::to_string(wr.t1) +
                        " after T - epsilon = " + std::to_string(T - p.epsilon));
}

BackwardCore build_backward_core(const RandomFieldRep& rep, const BackwardProblem& p,
                                 const TimeGrid& tgrid, bool transform_integrands,
                                 std::vector<double>* bounds_out,
                                 std::vector<double>* det_shift_out, std::vector<double>* psi_phi_out) {
  const int K = p.basis.mode_count;
  const int M = tgrid.steps;
  if (rep.modes() != K)
    throw SolverError(ErrorKind::ShapeMismatch, "representation mode count != basis mode count");
  int N = std::max(rep.components(), static_cast<int>(p.beta_profiles.size()));

  BackwardCore core;
  core.K = K;
  core.N = N;
  core.M = M;
  core.tgrid = tgrid;
  core.lambdas = p.basis.eigenvalues;
  core.kappa = p.weight.kappa;
  core.rho_steps = sample_steps(p.weight.rho, tgrid);
  core.ybar.assign(static_cast<size_t>(K), 0.0);
  core.mean_gamma.assign(static_cast<size_t>(K), 0.0);
  core.yhat.assign(static_cast<size_t>(K) * static_cast<size_t>(N) * static_cast<size_t>(M), 0.0);
  core.ghat.assign(core.yhat.size(), 0.0);
  core.beta_steps.assign(static_cast<size_t>(N) * static_cast<size_t>(M), 0.0);
  core.r_knots.assign(static_cast<size_t>(K) * static_cast<size_t>(M + 1), 0.0);
  core.y_phi.assign(static_cast<size_t>(K) * static_cast<size_t>(M + 1), 0.0);

  for (size_t d = 0; d < p.beta_profiles.size(); ++d) {
    std::vector<double> s = sample_steps(p.beta_profiles[d], tgrid);
    std::copy(s.begin(), s.end(), core.beta_steps.begin() + static_cast<long>(d) * M);
  }

  if (!p.phi_modes.empty() && static_cast<int>(p.phi_modes.size()) != K)
    throw SolverError(ErrorKind::ShapeMismatch, "source mode table count != mode count");

  if (bounds_out != nullptr) bounds_out->assign(static_cast<size_t>(K), 0.0);
  if (det_shift_out != nullptr) det_shift_out->assign(static_cast<size_t>(K), 0.0);
  if (psi_phi_out != nullptr) psi_phi_out->assign(static_cast<size_t>(K), 0.0);

  for (int k = 0; k < K; ++k) {
    const ModeRepresentation& e = rep.entries[static_cast<size_t>(k)];
    double lambda = core.lambdas[static_cast<size_t>(k)];
    core.mean_gamma[static_cast<size_t>(k)] = e.mean;

    double worst_bound = 0.0;
    for (size_t d = 0; d < e.integrands.size(); ++d) {
      const StepFunction& g = e.integrands[d];
      if (g.empty()) continue;
      std::vector<double> gv = sample_steps(g, tgrid);
      std::copy(gv.begin(), gv.end(),
                core.ghat.begin() +
                    (static_cast<size_t>(k) * static_cast<size_t>(N) + d) * static_cast<size_t>(M));
      std::vector<double> yv;
      if (transform_integrands) {
        double b = 0.0;
        yv = integrand_transform(p.weight, lambda, g, p.epsilon, tgrid, &b);
        worst_bound = std::max(worst_bound, b);
      } else {
        if (!g.is_zero() && g.support_end() > tgrid.horizon + 1e-12)
          throw SolverError(ErrorKind::SupportViolation, "terminal integrand extends past the horizon");
        yv = gv;
      }
      std::copy(yv.begin(), yv.end(),
                core.yhat.begin() +
                    (static_cast<size_t>(k) * static_cast<size_t>(N) + d) * static_cast<size_t>(M));
    }
    if (bounds_out != nullptr) (*bounds_out)[static_cast<size_t>(k)] = worst_bound;

    auto r = coupling_suffix(core.yhat_mode(k), core.beta_steps, tgrid);
    std::copy(r.begin(), r.end(), core.r_knots.begin() + static_cast<size_t>(k) * static_cast<size_t>(M + 1));

    double psi_phi = 0.0;
    if (!p.phi_modes.empty() && !p.phi_modes[static_cast<size_t>(k)].empty()) {
      std::vector<double> yphi = source_component(p.phi_modes[static_cast<size_t>(k)], lambda, tgrid);
      std::copy(yphi.begin(), yphi.end(),
                core.y_phi.begin() + static_cast<size_t>(k) * static_cast<size_t>(M + 1));
      psi_phi = source_condition_value(p.phi_modes[static_cast<size_t>(k)], lambda, p.weight);
    }
    if (psi_phi_out != nullptr) (*psi_phi_out)[static_cast<size_t>(k)] = psi_phi;

    if (transform_integrands) {
      double shift = coupling_condition_shift(
          p.weight, lambda,
          std::span<const double>(core.r_knots).subspan(static_cast<size_t>(k) * static_cast<size_t>(M + 1),
                                                        static_cast<size_t>(M + 1)),
          core.rho_steps, tgrid);
      if (det_shift_out != nullptr) (*det_shift_out)[static_cast<size_t>(k)] = shift;
      core.ybar[static_cast<size_t>(k)] = mean_level(p.weight, lambda, e.mean - psi_phi - shift);
    } else {
      core.ybar[static_cast<size_t>(k)] = e.mean;
    }
  }
  return core;
}

BackwardSolution run_backward(const BackwardCore& core, const BackwardProblem& p,
                              const WienerEnsemble& wiener, const BackwardOptions& opts,
                              bool compute_condition_residual) {
  const int K = core.K, N = core.N, M = core.M;
  const int P = wiener.paths();
  if (wiener.components() < N)
    throw SolverError(ErrorKind::ShapeMismatch, "Wiener ensemble has fewer components than the problem");
  const int NW = wiener.components();
  const TimeGrid& tgrid = core.tgrid;

  BackwardSolution sol;
  sol.tgrid = tgrid;
  sol.paths = P;
  sol.modes = K;
  sol.components = N;
  sol.seed = wiener.seed();
  sol.alpha.assign(static_cast<size_t>(P) * static_cast<size_t>(K), 0.0);
  sol.ybar = core.ybar;
  sol.yhat_steps = core.yhat;
  sol.y_phi = core.y_phi;
  if (compute_condition_residual) {
    sol.condition_residual.assign(static_cast<size_t>(P), 0.0);
    sol.psi_norm.assign(static_cast<size_t>(P), 0.0);
  }

  // Upsilon is deterministic: e^{-lambda (T - t_j)} yhat_j, zero at the
  // terminal knot and on the margin past T - eps by construction
  sol.upsilon.assign(static_cast<size_t>(N) * static_cast<size_t>(K) * static_cast<size_t>(M + 1), 0.0);
  for (int d = 0; d < N; ++d)
    for (int k = 0; k < K; ++k) {
      double lambda = core.lambdas[static_cast<size_t>(k)];
      for (int j = 0; j < M; ++j) {
        double v = core.yhat[(static_cast<size_t>(k) * static_cast<size_t>(N) + static_cast<size_t>(d)) *
                                 static_cast<size_t>(M) +
                             static_cast<size_t>(j)];
        if (v != 0.0)
          sol.upsilon[(static_cast<size_t>(d) * static_cast<size_t>(K) + static_cast<size_t>(k)) *
                          static_cast<size_t>(M + 1) +
                      static_cast<size_t>(j)] = std::exp(-lambda * (tgrid.horizon - tgrid.knot(j))) * v;
      }
    }

  long long per_path = static_cast<long long>(K) * (M + 1);
  int keep = opts.store_paths;
  if (keep < 0)
    keep = static_cast<int>(
        std::min<long long>(P, std::max<long long>(0, opts.store_budget_doubles / std::max(1LL, per_path))));
  keep = std::min(keep, P);
  sol.paths_stored = keep;
  sol.y.assign(static_cast<size_t>(keep) * static_cast<size_t>(per_path), 0.0);

  parallel_for_indexed(P, opts.workers, [&](int path) {
    std::vector<double> dw(static_cast<size_t>(NW) * static_cast<size_t>(M));
    wiener.path_increments(path, dw);
    std::vector<double> y_row(static_cast<size_t>(M + 1));
    std::vector<double> lhs(static_cast<size_t>(K), 0.0);
    std::vector<double> psi_path(static_cast<size_t>(K), 0.0);

    for (int k = 0; k < K; ++k) {
      double lambda = core.lambdas[static_cast<size_t>(k)];
      const double* rk = core.r_knots.data() + static_cast<size_t>(k) * static_cast<size_t>(M + 1);
      const double* yphi = core.y_phi.data() + static_cast<size_t>(k) * static_cast<size_t>(M + 1);
      auto yh = core.yhat_mode(k);

      double acc = core.ybar[static_cast<size_t>(k)];
      double cond = 0.0;
      for (int j = 0; j <= M; ++j) {
        double decay = std::exp(-lambda * (tgrid.horizon - tgrid.knot(j)));
        double y = decay * (acc + rk[j]) + yphi[j];
        if (!(std::abs(y) <= p.overflow_bound))
          throw SolverError(ErrorKind::UnstableStep,
                            "mode " + std::to_string(k + 1) + " exceeded the overflow bound at knot " +
                                std::to_string(j));
        y_row[static_cast<size_t>(j)] = y;
        if (compute_condition_residual) {
          if (j == 0) cond += core.kappa * y;
          if (j < M && core.rho_steps[static_cast<size_t>(j)] != 0.0)
            cond += core.rho_steps[static_cast<size_t>(j)] * y * tgrid.dt;
        }
        if (j < M) {
          for (int d = 0; d < N; ++d) {
            double v = yh[static_cast<size_t>(d) * static_cast<size_t>(M) + static_cast<size_t>(j)];
            if (v != 0.0)
              acc += v * dw[static_cast<size_t>(d) * static_cast<size_t>(M) + static_cast<size_t>(j)];
          }
        }
      }
      sol.alpha[static_cast<size_t>(path) * static_cast<size_t>(K) + static_cast<size_t>(k)] =
          y_row[static_cast<size_t>(M)];
      lhs[static_cast<size_t>(k)] = cond;

      if (compute_condition_residual) {
        double psi = core.mean_gamma[static_cast<size_t>(k)];
        const double* gh = core.ghat.data() + static_cast<size_t>(k) * static_cast<size_t>(N) * static_cast<size_t>(M);
        for (int j = 0; j < M; ++j)
          for (int d = 0; d < N; ++d) {
            double v = gh[static_cast<size_t>(d) * static_cast<size_t>(M) + static_cast<size_t>(j)];
            if (v != 0.0)
              psi += v * dw[static_cast<size_t>(d) * static_cast<size_t>(M) + static_cast<size_t>(j)];
          }
        psi_path[static_cast<size_t>(k)] = psi;
      }

      if (path < keep) {
        double* dst = sol.y.data() +
                      (static_cast<size_t>(path) * static_cast<size_t>(K) + static_cast<size_t>(k)) *
                          static_cast<size_t>(M + 1);
        std::copy(y_row.begin(), y_row.end(), dst);
      }
    }

    if (compute_condition_residual) {
      double num = 0.0, den = 0.0;
      for (int k = 0; k < K; ++k) {
        double dlt = lhs[static_cast<size_t>(k)] - psi_path[static_cast<size_t>(k)];
        num += dlt * dlt;
        den += psi_path[static_cast<size_t>(k)] * psi_path[static_cast<size_t>(k)];
      }
      double nrm = std::sqrt(den);
      sol.psi_norm[static_cast<size_t>(path)] = nrm;
      sol.condition_residual[static_cast<size_t>(path)] =
          nrm > 0.0 ? std::sqrt(num) / nrm : std::sqrt(num);
    }
  });
  return sol;
}

}  // namespace

BackwardSolution solve_backward_nonlocal(const RandomFieldRep& psi, const BackwardProblem& p,
                                         const WienerEnsemble& wiener, const BackwardOptions& opts) {
  std::vector<std::string> warnings;
  validate_backward_problem(p, opts, &warnings);
  if (!(p.epsilon > 0.0))
    throw ValidationError(ErrorKind::BadConfig, "nonlocal backward solve needs a positive margin epsilon");
  // the margin must be resolvable on the grid
  wiener.grid().knot_index(p.weight.horizon - p.epsilon);

  std::vector<double> bounds, det_shift, psi_phi;
  BackwardCore core =
      build_backward_core(psi, p, wiener.grid(), /*transform=*/true, &bounds, &det_shift, &psi_phi);
  BackwardSolution sol = run_backward(core, p, wiener, opts, /*condition=*/true);
  sol.integrand_bounds = std::move(bounds);
  sol.det_shift = std::move(det_shift);
  sol.psi_phi = std::move(psi_phi);
  sol.warnings = std::move(warnings);
  return sol;
}

BackwardSolution backward_cauchy(const RandomFieldRep& terminal_rep, const BackwardProblem& p,
                                 const WienerEnsemble& wiener, const BackwardOptions& opts) {
  std::vector<std::string> warnings;
  validate_backward_problem(p, opts, &warnings);
  BackwardCore core =
      build_backward_core(terminal_rep, p, wiener.grid(), /*transform=*/false, nullptr, nullptr, nullptr);
  BackwardSolution sol = run_backward(core, p, wiener, opts, /*condition=*/false);
  sol.warnings = std::move(warnings);
  return sol;
}

RandomFieldRep condition_representation(const RandomFieldRep& terminal_rep, const BackwardProblem& p,
                                        const TimeGrid& tgrid) {
  const int K = p.basis.mode_count;
  const int M = tgrid.steps;
  if (terminal_rep.modes() != K)
    throw SolverError(ErrorKind::ShapeMismatch, "representation mode count != basis mode count");
  std::vector<double> rho_steps = sample_steps(p.weight.rho, tgrid);

  RandomFieldRep out;
  out.entries.resize(static_cast<size_t>(K));
  for (int k = 0; k < K; ++k) {
    const ModeRepresentation& e = terminal_rep.entries[static_cast<size_t>(k)];
    double lambda = p.basis.eigenvalues[static_cast<size_t>(k)];
    ModeRepresentation& o = out.entries[static_cast<size_t>(k)];

    // martingale part: gamma_hat(t_j) = q(t_j) * yhat(t_j) per step
    size_t comps = e.integrands.size();
    std::vector<double> yhat(static_cast<size_t>(comps) * static_cast<size_t>(M), 0.0);
    o.integrands.resize(comps);
    for (size_t d = 0; d < comps; ++d) {
      if (e.integrands[d].empty()) continue;
      std::vector<double> yv = sample_steps(e.integrands[d], tgrid);
      std::copy(yv.begin(), yv.end(), yhat.begin() + static_cast<long>(d) * M);
      int last = -1;
      for (int j = 0; j < M; ++j)
        if (yv[static_cast<size_t>(j)] != 0.0) last = j;
      if (last < 0) continue;
      StepFunction g;
      g.breakpoints.resize(static_cast<size_t>(last) + 2);
      g.values.resize(static_cast<size_t>(last) + 1);
      for (int j = 0; j <= last + 1; ++j) g.breakpoints[static_cast<size_t>(j)] = tgrid.knot(j);
      for (int j = 0; j <= last; ++j)
        g.values[static_cast<size_t>(j)] =
            yv[static_cast<size_t>(j)] == 0.0 ? 0.0
                                              : q_factor(p.weight, lambda, tgrid.knot(j)) * yv[static_cast<size_t>(j)];
      o.integrands[d] = std::move(g);
    }

    // mean part: Y_bar (q(0) + kappa e^{-lambda T}) + coupling shift + source part
    std::vector<double> beta(static_cast<size_t>(comps) * static_cast<size_t>(M), 0.0);
    for (size_t d = 0; d < std::min(comps, p.beta_profiles.size()); ++d) {
      std::vector<double> s = sample_steps(p.beta_profiles[d], tgrid);
      std::copy(s.begin(), s.end(), beta.begin() + static_cast<long>(d) * M);
    }
    std::vector<double> r = coupling_suffix(yhat, beta, tgrid);
    double shift = coupling_condition_shift(p.weight, lambda, r, rho_steps, tgrid);
    double psi_phi = p.phi_modes.empty() || p.phi_modes[static_cast<size_t>(k)].empty()
                         ? 0.0
                         : source_condition_value(p.phi_modes[static_cast<size_t>(k)], lambda, p.weight);
    o.mean = e.mean * backward_denominator(p.weight, lambda) + shift + psi_phi;
  }
  return out;
}

}  // namespace nlspde
