#include "nlspde/forward.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "nlspde/parallel.hpp"

namespace nlspde {

double PiecewiseLinearFn::operator()(double s) const {
  if (empty()) return 0.0;
  if (s <= t.front()) return v.front();
  if (s >= t.back()) return v.back();
  auto it = std::upper_bound(t.begin(), t.end(), s);
  size_t j = static_cast<size_t>(it - t.begin());
  double w = (s - t[j - 1]) / (t[j] - t[j - 1]);
  return v[j - 1] + w * (v[j] - v[j - 1]);
}

void PiecewiseLinearFn::check() const {
  if (empty()) return;
  if (t.size() != v.size() || t.size() < 2)
    throw ValidationError(ErrorKind::BadConfig, "piecewise-linear table needs matching arrays of size >= 2");
  for (size_t i = 1; i < t.size(); ++i)
    if (!(t[i] > t[i - 1]))
      throw ValidationError(ErrorKind::BadConfig, "piecewise-linear knots must be strictly increasing");
  for (double x : v)
    if (!std::isfinite(x)) throw ValidationError(ErrorKind::BadConfig, "piecewise-linear table has non-finite value");
}

double mean_advance(double lambda, const PiecewiseLinearFn* phi, double t0, double t1, double y) {
  if (!(t1 >= t0)) throw SolverError(ErrorKind::BadInterval, "mean advance interval reversed");
  if (t1 == t0) return y;
  if (phi == nullptr || phi->empty()) return y * std::exp(-lambda * (t1 - t0));

  // split at interior knots so each segment is exactly linear
  std::vector<double> cuts{t0};
  for (double tk : phi->t)
    if (tk > t0 && tk < t1) cuts.push_back(tk);
  cuts.push_back(t1);
  for (size_t s = 0; s + 1 < cuts.size(); ++s) {
    double a = cuts[s], b = cuts[s + 1];
    double d = b - a;
    double x = lambda * d;
    double c0 = (*phi)(a);
    double c1 = (*phi)(b);
    double p1 = expm1_div(x);
    double p2 = expm1_div2(x);
    y = y * std::exp(-x) + d * (c0 * p1 + (c1 - c0) * (p1 - p2));
  }
  return y;
}

double weighted_mean_functional(double lambda, const PiecewiseLinearFn* phi,
                                const NonlocalWeight& w, double y0) {
  const double T = w.horizon;
  if (T == 0.0) return w.kappa * y0;

  std::vector<double> cuts{0.0, T};
  for (double b : w.rho.breakpoints)
    if (b > 0.0 && b < T) cuts.push_back(b);
  if (phi != nullptr)
    for (double tk : phi->t)
      if (tk > 0.0 && tk < T) cuts.push_back(tk);
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

  double acc = 0.0;
  double y = y0;
  for (size_t s = 0; s + 1 < cuts.size(); ++s) {
    double a = cuts[s], b = cuts[s + 1];
    double rho = w.rho.value_at(0.5 * (a + b));
    double c0 = phi ? (*phi)(a) : 0.0;
    double c1 = phi ? (*phi)(b) : 0.0;
    double yb = mean_advance(lambda, phi, a, b, y);
    if (rho != 0.0) {
      // integrate the mode ODE: int_a^b u dt = (u(a) - u(b) + int phi) / lambda
      double source = 0.5 * (c0 + c1) * (b - a);
      acc += rho * (y - yb + source) / lambda;
    }
    y = yb;
  }
  return acc + w.kappa * y;
}

MeanTrajectory mean_evolve(const SpectralBasis& basis, std::span<const double> xi,
                           const std::vector<PiecewiseLinearFn>& phi_mean, const TimeGrid& tgrid) {
  const int K = basis.mode_count;
  if (static_cast<int>(xi.size()) != K)
    throw SolverError(ErrorKind::ShapeMismatch, "initial coefficient count != mode count");
  if (!phi_mean.empty() && static_cast<int>(phi_mean.size()) != K)
    throw SolverError(ErrorKind::ShapeMismatch, "phi table count != mode count");

  MeanTrajectory out;
  out.tgrid = tgrid;
  out.modes = K;
  out.values.assign(static_cast<size_t>(K) * static_cast<size_t>(tgrid.steps + 1), 0.0);
  for (int k = 0; k < K; ++k) {
    const PiecewiseLinearFn* phi = phi_mean.empty() ? nullptr : &phi_mean[static_cast<size_t>(k)];
    double lambda = basis.eigenvalues[static_cast<size_t>(k)];
    double y = xi[static_cast<size_t>(k)];
    double* row = out.values.data() + static_cast<size_t>(k) * static_cast<size_t>(tgrid.steps + 1);
    row[0] = y;
    for (int j = 0; j < tgrid.steps; ++j) {
      y = mean_advance(lambda, phi, tgrid.knot(j), tgrid.knot(j + 1), y);
      row[j + 1] = y;
    }
  }
  return out;
}

std::vector<double> apply_M0(const SpectralBasis& basis, const NonlocalWeight& w,
                             std::span<const double> xi) {
  if (static_cast<int>(xi.size()) != basis.mode_count)
    throw SolverError(ErrorKind::ShapeMismatch, "coefficient count != mode count");
  std::vector<double> out(xi.size());
  for (int k = 0; k < basis.mode_count; ++k)
    out[static_cast<size_t>(k)] =
        forward_multiplier(w, basis.eigenvalues[static_cast<size_t>(k)]) * xi[static_cast<size_t>(k)];
  return out;
}

std::vector<double> apply_M(const SpectralBasis& basis, const NonlocalWeight& w,
                            const std::vector<PiecewiseLinearFn>& phi_mean) {
  std::vector<double> out(static_cast<size_t>(basis.mode_count), 0.0);
  if (phi_mean.empty()) return out;
  if (static_cast<int>(phi_mean.size()) != basis.mode_count)
    throw SolverError(ErrorKind::ShapeMismatch, "phi table count != mode count");
  for (int k = 0; k < basis.mode_count; ++k)
    out[static_cast<size_t>(k)] = weighted_mean_functional(
        basis.eigenvalues[static_cast<size_t>(k)], &phi_mean[static_cast<size_t>(k)], w, 0.0);
  return out;
}

RecoveryResult recover_initial(std::span<const double> mu_field,
                               const std::vector<PiecewiseLinearFn>& phi_mean,
                               const SpectralBasis& basis, const NonlocalWeight& w,
                               const RecoveryOptions& opts) {
  WeightReport wr = validate(w);
  if (!wr.valid() && !opts.allow_ill_posed)
    throw ValidationError(ErrorKind::IllPosedWeight,
                          "weight rejected (" + wr.detail + "); pass allow_ill_posed to study it");

  RecoveryResult res;
  res.ill_posed = !wr.valid();
  std::vector<double> mu_coeffs = project(mu_field, basis);
  std::vector<double> mphi = apply_M(basis, w, phi_mean);

  const int K = basis.mode_count;
  res.xi.resize(static_cast<size_t>(K));
  res.multipliers.resize(static_cast<size_t>(K));
  res.amplification.resize(static_cast<size_t>(K));
  for (int k = 0; k < K; ++k) {
    double m = forward_multiplier(w, basis.eigenvalues[static_cast<size_t>(k)]);
    if (!std::isfinite(1.0 / m))
      throw SolverError(ErrorKind::IllPosedWeight, "multiplier underflow at mode " + std::to_string(k + 1));
    res.multipliers[static_cast<size_t>(k)] = m;
    res.amplification[static_cast<size_t>(k)] = 1.0 / m;
    res.xi[static_cast<size_t>(k)] = (mu_coeffs[static_cast<size_t>(k)] - mphi[static_cast<size_t>(k)]) / m;
  }

  std::vector<double> back = lift(mu_coeffs, basis);
  std::vector<double> tail(mu_field.size());
  for (size_t i = 0; i < mu_field.size(); ++i) tail[i] = mu_field[i] - back[i];
  res.mu_norm = h_norm(mu_field, basis.grid.spacing);
  res.tail_norm = h_norm(tail, basis.grid.spacing);
  res.tail_warning = res.tail_norm > opts.tail_warn_fraction * std::max(res.mu_norm, 1e-300);
  return res;
}

double superparabolicity_margin(const EllipticOperator& op, const std::vector<ForwardNoise>& noise) {
  const int n = op.grid.n_interior;
  double worst = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    double a_node = 0.5 * (op.a_mid[static_cast<size_t>(i)] + op.a_mid[static_cast<size_t>(i + 1)]);
    double s = 0.0;
    for (const auto& c : noise) {
      if (c.beta_bar_nodes.empty()) continue;
      double b = c.beta_bar_nodes[static_cast<size_t>(i)];
      s += b * b;
    }
    worst = std::min(worst, a_node - 0.5 * s);
  }
  return worst;
}

void validate_forward_problem(const ForwardProblem& p) {
  const int n = p.basis.grid.n_interior;
  const int K = p.basis.mode_count;
  if (p.weight.direction != NonlocalWeight::Direction::Forward)
    throw ValidationError(ErrorKind::BadConfig, "forward problem needs a forward-direction weight");

  // theta rule: theta == T when kappa == 0, theta in [0, T) when kappa != 0
  const double T = p.weight.horizon;
  if (p.weight.kappa == 0.0) {
    if (std::abs(p.theta - T) > 1e-12 * std::max(1.0, T))
      throw ValidationError(ErrorKind::ThetaViolation, "kappa = 0 requires theta = T");
  } else {
    if (!(p.theta >= 0.0 && p.theta < T))
      throw ValidationError(ErrorKind::ThetaViolation, "kappa != 0 requires theta in [0, T)");
  }

  if (!p.phi_mean.empty()) {
    if (static_cast<int>(p.phi_mean.size()) != K)
      throw ValidationError(ErrorKind::ShapeMismatch, "phi table count != mode count");
    for (const auto& f : p.phi_mean) f.check();
  }

  bool any_grad_noise = false;
  for (const ForwardNoise& c : p.noise) {
    if (!c.beta_bar_nodes.empty() && static_cast<int>(c.beta_bar_nodes.size()) != n)
      throw ValidationError(ErrorKind::ShapeMismatch, "beta_bar node samples != grid size");
    if (!c.beta_nodes.empty() && static_cast<int>(c.beta_nodes.size()) != n)
      throw ValidationError(ErrorKind::ShapeMismatch, "beta node samples != grid size");
    if (!c.beta_bar_nodes.empty()) {
      double scale = 0.0;
      for (double b : c.beta_bar_nodes) scale = std::max(scale, std::abs(b));
      if (scale > 0.0) any_grad_noise = true;
      double tol = 1e-12 * (1.0 + scale);
      if (std::abs(c.beta_bar_nodes.front()) > tol || std::abs(c.beta_bar_nodes.back()) > tol)
        throw ValidationError(ErrorKind::BadConfig,
                              "gradient noise coefficient must vanish at the boundary-adjacent nodes");
    }
  }

  if (any_grad_noise || p.coercivity_floor > 0.0) {
    double margin = superparabolicity_margin(p.op, p.noise);
    if (!(margin > 0.0) || margin < p.coercivity_floor)
      throw ValidationError(ErrorKind::BadConfig,
                            "superparabolicity margin " + std::to_string(margin) +
                                " below the required floor " + std::to_string(p.coercivity_floor));
  }
}

ForwardStepData build_forward_step_data(const ForwardProblem& p, const TimeGrid& tgrid) {
  const int K = p.basis.mode_count;
  const int N = static_cast<int>(p.noise.size());
  const int M = tgrid.steps;
  const int n = p.basis.grid.n_interior;
  const double h = p.basis.grid.spacing;

  ForwardStepData d;
  d.modes = K;
  d.components = N;
  d.steps = M;
  d.tgrid = tgrid;
  d.kappa = p.weight.kappa;
  d.rho_steps = sample_steps(p.weight.rho, tgrid);

  d.decay.resize(static_cast<size_t>(K));
  d.eta_gain.resize(static_cast<size_t>(K));
  d.det_source.assign(static_cast<size_t>(K) * static_cast<size_t>(M), 0.0);
  for (int k = 0; k < K; ++k) {
    double lambda = p.basis.eigenvalues[static_cast<size_t>(k)];
    d.decay[static_cast<size_t>(k)] = std::exp(-lambda * tgrid.dt);
    d.eta_gain[static_cast<size_t>(k)] = tgrid.dt * expm1_div(lambda * tgrid.dt);
    const PiecewiseLinearFn* phi = p.phi_mean.empty() ? nullptr : &p.phi_mean[static_cast<size_t>(k)];
    if (phi != nullptr && !phi->empty()) {
      for (int j = 0; j < M; ++j)
        d.det_source[static_cast<size_t>(k) * static_cast<size_t>(M) + static_cast<size_t>(j)] =
            mean_advance(lambda, phi, tgrid.knot(j), tgrid.knot(j + 1), 0.0);
    }
  }

  d.bhat.assign(static_cast<size_t>(N) * static_cast<size_t>(K) * static_cast<size_t>(K), 0.0);
  d.has_b.assign(static_cast<size_t>(std::max(N, 1)), 0);
  d.h_steps.assign(static_cast<size_t>(N) * static_cast<size_t>(K) * static_cast<size_t>(M), 0.0);
  d.has_h.assign(static_cast<size_t>(std::max(N, 1)), 0);
  d.fluct_steps.assign(static_cast<size_t>(N) * static_cast<size_t>(K) * static_cast<size_t>(M), 0.0);
  d.has_fluct.assign(static_cast<size_t>(std::max(N, 1)), 0);

  std::vector<double> gridfun(static_cast<size_t>(n));
  for (int c = 0; c < N; ++c) {
    const ForwardNoise& comp = p.noise[static_cast<size_t>(c)];
    bool any_b = false;
    for (double b : comp.beta_bar_nodes) any_b = any_b || b != 0.0;
    for (double b : comp.beta_nodes) any_b = any_b || b != 0.0;
    d.has_b[static_cast<size_t>(c)] = any_b ? 1 : 0;
    if (any_b) {
      // mode-space matrix of B: columns are project(B v_l), with B applied in
      // grid space (centered differences, Dirichlet ghost zeros)
      for (int l = 0; l < K; ++l) {
        auto vl = p.basis.mode(l);
        for (int i = 0; i < n; ++i) {
          double left = (i > 0) ? vl[static_cast<size_t>(i - 1)] : 0.0;
          double right = (i + 1 < n) ? vl[static_cast<size_t>(i + 1)] : 0.0;
          double dv = (right - left) / (2.0 * h);
          double bb = comp.beta_bar_nodes.empty() ? 0.0 : comp.beta_bar_nodes[static_cast<size_t>(i)];
          double bz = comp.beta_nodes.empty() ? 0.0 : comp.beta_nodes[static_cast<size_t>(i)];
          gridfun[static_cast<size_t>(i)] = bb * dv + bz * vl[static_cast<size_t>(i)];
        }
        for (int k = 0; k < K; ++k)
          d.bhat[(static_cast<size_t>(c) * static_cast<size_t>(K) + static_cast<size_t>(k)) *
                     static_cast<size_t>(K) +
                 static_cast<size_t>(l)] = h_inner(p.basis.mode(k), gridfun, h);
      }
    }
    if (!comp.h_modes.empty()) {
      if (static_cast<int>(comp.h_modes.size()) != K)
        throw SolverError(ErrorKind::ShapeMismatch, "h mode table count != mode count");
      bool any_h = false;
      for (int k = 0; k < K; ++k) {
        const StepFunction& f = comp.h_modes[static_cast<size_t>(k)];
        if (f.empty()) continue;
        std::vector<double> s = sample_steps(f, tgrid);
        for (int j = 0; j < M; ++j) {
          double val = s[static_cast<size_t>(j)];
          d.h_steps[(static_cast<size_t>(c) * static_cast<size_t>(K) + static_cast<size_t>(k)) *
                        static_cast<size_t>(M) +
                    static_cast<size_t>(j)] = val;
          any_h = any_h || val != 0.0;
        }
      }
      d.has_h[static_cast<size_t>(c)] = any_h ? 1 : 0;
    }
  }

  if (!p.phi_fluct.empty()) {
    if (static_cast<int>(p.phi_fluct.size()) != K)
      throw SolverError(ErrorKind::ShapeMismatch, "phi fluctuation table count != mode count");
    for (int k = 0; k < K; ++k) {
      const auto& per_comp = p.phi_fluct[static_cast<size_t>(k)];
      if (per_comp.empty()) continue;
      if (static_cast<int>(per_comp.size()) != N)
        throw SolverError(ErrorKind::ShapeMismatch, "phi fluctuation component count != noise count");
      for (int c = 0; c < N; ++c) {
        const StepFunction& f = per_comp[static_cast<size_t>(c)];
        if (f.empty()) continue;
        std::vector<double> s = sample_steps(f, tgrid);
        bool any = false;
        for (int j = 0; j < M; ++j) {
          d.fluct_steps[(static_cast<size_t>(c) * static_cast<size_t>(K) + static_cast<size_t>(k)) *
                            static_cast<size_t>(M) +
                        static_cast<size_t>(j)] = s[static_cast<size_t>(j)];
          any = any || s[static_cast<size_t>(j)] != 0.0;
        }
        if (any) d.has_fluct[static_cast<size_t>(c)] = 1;
      }
    }
  }
  return d;
}

void forward_step_once(const ForwardStepData& d, int j, std::span<double> y, std::span<double> eta,
                       std::span<const double> dw, double overflow_bound) {
  const int K = d.modes, N = d.components, M = d.steps;
  double ynew[64];
  std::vector<double> ynew_big;
  double* next_buf = ynew;
  if (K > 64) {
    ynew_big.resize(static_cast<size_t>(K));
    next_buf = ynew_big.data();
  }
  for (int k = 0; k < K; ++k) {
    double noise_sum = 0.0;
    for (int c = 0; c < N; ++c) {
      double g = 0.0;
      if (d.has_b[static_cast<size_t>(c)]) {
        const double* row = d.bhat.data() + (static_cast<size_t>(c) * static_cast<size_t>(K) +
                                             static_cast<size_t>(k)) *
                                                static_cast<size_t>(K);
        for (int l = 0; l < K; ++l) g += row[l] * y[static_cast<size_t>(l)];
      }
      if (d.has_h[static_cast<size_t>(c)])
        g += d.h_steps[(static_cast<size_t>(c) * static_cast<size_t>(K) + static_cast<size_t>(k)) *
                           static_cast<size_t>(M) +
                       static_cast<size_t>(j)];
      if (g != 0.0) noise_sum += g * dw[static_cast<size_t>(c) * static_cast<size_t>(M) + static_cast<size_t>(j)];
    }
    double next = d.decay[static_cast<size_t>(k)] * (y[static_cast<size_t>(k)] + noise_sum) +
                  d.det_source[static_cast<size_t>(k) * static_cast<size_t>(M) + static_cast<size_t>(j)] +
                  eta[static_cast<size_t>(k)] * d.eta_gain[static_cast<size_t>(k)];
    if (!(std::abs(next) <= overflow_bound))
      throw SolverError(ErrorKind::UnstableStep,
                        "mode " + std::to_string(k + 1) + " exceeded the overflow bound at step " +
                            std::to_string(j) + "; coercivity margin or step size is insufficient");
    next_buf[k] = next;
  }
  for (int k = 0; k < K; ++k) {
    for (int c = 0; c < N; ++c) {
      if (!d.has_fluct[static_cast<size_t>(c)]) continue;
      double g = d.fluct_steps[(static_cast<size_t>(c) * static_cast<size_t>(K) + static_cast<size_t>(k)) *
                                   static_cast<size_t>(M) +
                               static_cast<size_t>(j)];
      if (g != 0.0)
        eta[static_cast<size_t>(k)] += g * dw[static_cast<size_t>(c) * static_cast<size_t>(M) + static_cast<size_t>(j)];
    }
    y[static_cast<size_t>(k)] = next_buf[k];
  }
}

namespace {

// One path of the mode recursion; writes the trajectory into traj_row when
// non-null, and the condition/terminal slots always.
void forward_path(const ForwardStepData& d, std::span<const double> xi,
                  std::span<const double> dw, double overflow_bound, double* traj_row,
                  double* condition_out, double* terminal_out) {
  const int K = d.modes, M = d.steps;
  const double dt = d.tgrid.dt;
  std::vector<double> y(xi.begin(), xi.end());
  std::vector<double> yprev(static_cast<size_t>(K));
  std::vector<double> eta(static_cast<size_t>(K), 0.0);
  std::vector<double> acc(static_cast<size_t>(K), 0.0);

  if (traj_row != nullptr)
    for (int k = 0; k < K; ++k) traj_row[static_cast<size_t>(k) * static_cast<size_t>(M + 1)] = y[static_cast<size_t>(k)];

  for (int j = 0; j < M; ++j) {
    double rho_j = d.rho_steps[static_cast<size_t>(j)];
    std::copy(y.begin(), y.end(), yprev.begin());
    forward_step_once(d, j, y, eta, dw, overflow_bound);
    for (int k = 0; k < K; ++k) {
      if (rho_j != 0.0)
        acc[static_cast<size_t>(k)] += rho_j * dt * 0.5 * (yprev[static_cast<size_t>(k)] + y[static_cast<size_t>(k)]);
      if (traj_row != nullptr)
        traj_row[static_cast<size_t>(k) * static_cast<size_t>(M + 1) + static_cast<size_t>(j + 1)] =
            y[static_cast<size_t>(k)];
    }
  }
  for (int k = 0; k < K; ++k) {
    condition_out[k] = acc[static_cast<size_t>(k)] + d.kappa * y[static_cast<size_t>(k)];
    terminal_out[k] = y[static_cast<size_t>(k)];
  }
}

}  // namespace

ModeEnsemble simulate_forward(const ForwardProblem& p, std::span<const double> xi,
                              const WienerEnsemble& wiener, const SimOptions& opts) {
  validate_forward_problem(p);
  const int K = p.basis.mode_count;
  const int N = static_cast<int>(p.noise.size());
  if (wiener.components() < N)
    throw SolverError(ErrorKind::ShapeMismatch, "Wiener ensemble has fewer components than the noise spec");
  if (static_cast<int>(xi.size()) != K)
    throw SolverError(ErrorKind::ShapeMismatch, "initial coefficient count != mode count");

  const TimeGrid tgrid = wiener.grid();
  ForwardStepData data = build_forward_step_data(p, tgrid);

  const int P = wiener.paths();
  const int M = tgrid.steps;
  ModeEnsemble ens;
  ens.tgrid = tgrid;
  ens.paths = P;
  ens.modes = K;
  ens.components = wiener.components();
  ens.seed = wiener.seed();
  ens.acc_weight = p.weight;
  ens.condition_acc.assign(static_cast<size_t>(P) * static_cast<size_t>(K), 0.0);
  ens.terminal.assign(static_cast<size_t>(P) * static_cast<size_t>(K), 0.0);

  long long per_path = static_cast<long long>(K) * (M + 1);
  int keep = opts.store_paths;
  if (keep < 0) keep = static_cast<int>(std::min<long long>(P, std::max<long long>(0, opts.store_budget_doubles / std::max(1LL, per_path))));
  keep = std::min(keep, P);
  ens.paths_stored = keep;
  ens.traj.assign(static_cast<size_t>(keep) * static_cast<size_t>(per_path), 0.0);

  parallel_for_indexed(P, opts.workers, [&](int path) {
    std::vector<double> dw(static_cast<size_t>(wiener.components()) * static_cast<size_t>(M));
    wiener.path_increments(path, dw);
    double* traj_row =
        path < keep ? ens.traj.data() + static_cast<size_t>(path) * static_cast<size_t>(per_path) : nullptr;
    forward_path(data, xi, dw, p.overflow_bound, traj_row,
                 ens.condition_acc.data() + static_cast<size_t>(path) * static_cast<size_t>(K),
                 ens.terminal.data() + static_cast<size_t>(path) * static_cast<size_t>(K));
  });
  return ens;
}

namespace {

bool same_weight(const NonlocalWeight& a, const NonlocalWeight& b) {
  return a.kappa == b.kappa && a.horizon == b.horizon && a.direction == b.direction &&
         a.rho.breakpoints == b.rho.breakpoints && a.rho.values == b.rho.values;
}

}  // namespace

NonlocalAverage nonlocal_average(const ModeEnsemble& ens, const NonlocalWeight& w) {
  const int P = ens.paths, K = ens.modes;
  std::vector<double> per_path;
  const double* acc = nullptr;
  if (same_weight(ens.acc_weight, w)) {
    acc = ens.condition_acc.data();
  } else if (ens.paths_stored == ens.paths) {
    // recompute the same piecewise quadrature from the retained trajectories
    std::vector<double> rho = sample_steps(w.rho, ens.tgrid);
    per_path.assign(static_cast<size_t>(P) * static_cast<size_t>(K), 0.0);
    for (int p = 0; p < P; ++p) {
      for (int k = 0; k < K; ++k) {
        auto y = ens.path_mode(p, k);
        double a = 0.0;
        for (int j = 0; j < ens.tgrid.steps; ++j)
          if (rho[static_cast<size_t>(j)] != 0.0)
            a += rho[static_cast<size_t>(j)] * ens.tgrid.dt * 0.5 *
                 (y[static_cast<size_t>(j)] + y[static_cast<size_t>(j + 1)]);
        per_path[static_cast<size_t>(p) * static_cast<size_t>(K) + static_cast<size_t>(k)] =
            a + w.kappa * y[static_cast<size_t>(ens.tgrid.steps)];
      }
    }
    acc = per_path.data();
  } else {
    throw SolverError(ErrorKind::ShapeMismatch,
                      "ensemble does not retain full trajectories; averaging needs the weight it was run with");
  }

  NonlocalAverage out;
  out.mean.assign(static_cast<size_t>(K), 0.0);
  out.se.assign(static_cast<size_t>(K), std::numeric_limits<double>::quiet_NaN());
  for (int k = 0; k < K; ++k) {
    double s = 0.0;
    for (int p = 0; p < P; ++p) s += acc[static_cast<size_t>(p) * static_cast<size_t>(K) + static_cast<size_t>(k)];
    out.mean[static_cast<size_t>(k)] = s / static_cast<double>(P);
  }
  out.se_valid = P > 1;
  if (out.se_valid) {
    for (int k = 0; k < K; ++k) {
      double m = out.mean[static_cast<size_t>(k)];
      double s2 = 0.0;
      for (int p = 0; p < P; ++p) {
        double dlt = acc[static_cast<size_t>(p) * static_cast<size_t>(K) + static_cast<size_t>(k)] - m;
        s2 += dlt * dlt;
      }
      out.se[static_cast<size_t>(k)] = std::sqrt(s2 / (static_cast<double>(P) * static_cast<double>(P - 1)));
    }
  }
  return out;
}

ForwardSolveResult solve_forward_nonlocal(std::span<const double> mu_field, const ForwardProblem& p,
                                          const WienerEnsemble& wiener, const SimOptions& opts,
                                          const RecoveryOptions& ropts) {
  ForwardSolveResult res;
  res.superparabolicity = superparabolicity_margin(p.op, p.noise);
  res.recovery = recover_initial(mu_field, p.phi_mean, p.basis, p.weight, ropts);
  res.ensemble = simulate_forward(p, res.recovery.xi, wiener, opts);
  res.average = nonlocal_average(res.ensemble, p.weight);

  std::vector<double> mu_hat = lift(res.average.mean, p.basis);
  std::vector<double> diff(mu_hat.size());
  for (size_t i = 0; i < mu_hat.size(); ++i) diff[i] = mu_hat[i] - mu_field[i];
  res.recovery_residual = h_norm(diff, p.basis.grid.spacing);

  MeanTrajectory mean = mean_evolve(p.basis, res.recovery.xi, p.phi_mean, wiener.grid());
  const double h = p.basis.grid.spacing;
  for (int j = 0; j <= mean.tgrid.steps; ++j) {
    std::vector<double> coeffs(static_cast<size_t>(mean.modes));
    for (int k = 0; k < mean.modes; ++k) coeffs[static_cast<size_t>(k)] = mean.at(k, j);
    std::vector<double> field = lift(coeffs, p.basis);
    res.max_h_norm = std::max(res.max_h_norm, h_norm(field, h));
    double g = 0.0;
    double prev = 0.0;
    for (size_t i = 0; i <= field.size(); ++i) {
      double cur = i < field.size() ? field[i] : 0.0;
      double df = (cur - prev) / h;
      g += df * df;
      prev = cur;
    }
    res.max_grad_norm = std::max(res.max_grad_norm, std::sqrt(h * g));
  }
  return res;
}

}  // namespace nlspde
