#include "nlspde/scenario.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "json.hpp"

#include "nlspde/io.hpp"
#include "nlspde/parallel.hpp"

namespace nlspde {

using nlohmann::json;

namespace {

LinearTable parse_linear_table(const json& j, const char* what) {
  if (j.is_number()) return LinearTable::constant(j.get<double>());
  if (!j.is_object() || !j.contains("x") || !j.contains("value"))
    throw ValidationError(ErrorKind::BadConfig,
                          std::string(what) + " must be a number or an {x:[...], value:[...]} table");
  LinearTable t;
  t.x = j.at("x").get<std::vector<double>>();
  t.value = j.at("value").get<std::vector<double>>();
  t.check();
  return t;
}

StepFunction parse_step(const json& j, double horizon, const char* what) {
  if (j.is_number()) {
    double v = j.get<double>();
    return StepFunction::constant(v, 0.0, horizon);
  }
  if (!j.is_object() || !j.contains("breakpoints") || !j.contains("values"))
    throw ValidationError(ErrorKind::BadConfig,
                          std::string(what) + " must be a number or {breakpoints:[...], values:[...]}");
  StepFunction f;
  f.breakpoints = j.at("breakpoints").get<std::vector<double>>();
  f.values = j.at("values").get<std::vector<double>>();
  f.check();
  return f;
}

RandomFieldRep parse_rep(const json& j, int modes, double horizon, const char* what) {
  RandomFieldRep rep;
  rep.entries.resize(static_cast<size_t>(modes));
  if (!j.is_object() || !j.contains("modes"))
    throw ValidationError(ErrorKind::BadConfig, std::string(what) + " must be {modes:[...]}");
  for (const auto& m : j.at("modes")) {
    int k = m.at("k").get<int>();
    if (k < 1 || k > modes)
      throw ValidationError(ErrorKind::BadConfig,
                            std::string(what) + " references mode " + std::to_string(k) +
                                " outside 1.." + std::to_string(modes));
    ModeRepresentation& e = rep.entries[static_cast<size_t>(k - 1)];
    e.mean = m.value("mean", 0.0);
    if (m.contains("integrands")) {
      for (const auto& g : m.at("integrands")) {
        int d = g.at("d").get<int>();
        if (d < 1) throw ValidationError(ErrorKind::BadConfig, "component indices are 1-based");
        if (static_cast<size_t>(d) > e.integrands.size()) e.integrands.resize(static_cast<size_t>(d));
        e.integrands[static_cast<size_t>(d - 1)] = parse_step(g, horizon, "integrand");
      }
    }
  }
  return rep;
}

std::filesystem::path resolve_out_dir(const Scenario& s, const RunOverrides& o) {
  if (o.out_dir.has_value()) return *o.out_dir;
  if (!s.output_dir.empty()) return s.output_dir;
  if (const char* env = std::getenv("NONLOCAL_SPDE_OUT"); env != nullptr && *env != '\0') return env;
  return "out";
}

}  // namespace

ScenarioKind parse_kind(const std::string& name) {
  if (name == "eig") return ScenarioKind::Eig;
  if (name == "forward-recover") return ScenarioKind::ForwardRecover;
  if (name == "forward-solve") return ScenarioKind::ForwardSolve;
  if (name == "backward-solve") return ScenarioKind::BackwardSolve;
  if (name == "roundtrip") return ScenarioKind::Roundtrip;
  if (name == "conditioning") return ScenarioKind::Conditioning;
  if (name == "verify") return ScenarioKind::Verify;
  throw ValidationError(ErrorKind::BadConfig, "unknown subcommand '" + name + "'");
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(ErrorKind::BadConfig, "cannot open scenario " + path.string());
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ValidationError(ErrorKind::BadConfig, "scenario is not valid JSON: " + std::string(e.what()));
  }

  Scenario s;
  try {
    const json& grid = j.at("grid");
    s.length = grid.at("length").get<double>();
    s.interior_nodes = grid.at("interior_nodes").get<int>();

    const json& op = j.at("operator");
    s.diffusion = parse_linear_table(op.at("diffusion"), "diffusion");
    s.zero_order = op.contains("zero_order") ? parse_linear_table(op.at("zero_order"), "zero_order")
                                             : LinearTable::constant(0.0);
    if (op.contains("shift")) {
      if (op.at("shift").is_string()) {
        if (op.at("shift").get<std::string>() != "auto")
          throw ValidationError(ErrorKind::BadConfig, "operator.shift must be a number or \"auto\"");
        s.auto_shift = true;
      } else {
        s.auto_shift = false;
        s.shift = op.at("shift").get<double>();
      }
    }

    s.modes = j.value("modes", 4);

    const json& w = j.at("weight");
    s.weight.kappa = w.at("kappa").get<double>();
    s.weight.horizon = w.at("T").get<double>();
    s.weight.rho = parse_step(w.at("rho"), s.weight.horizon, "rho");
    std::string dir = w.at("direction").get<std::string>();
    if (dir == "forward")
      s.weight.direction = NonlocalWeight::Direction::Forward;
    else if (dir == "backward")
      s.weight.direction = NonlocalWeight::Direction::Backward;
    else
      throw ValidationError(ErrorKind::BadConfig, "weight.direction must be forward or backward");

    if (j.contains("theta")) {
      s.theta = j.at("theta").get<double>();
      s.theta_given = true;
    }
    s.epsilon = j.value("epsilon", 0.0);

    if (j.contains("phi")) {
      for (const auto& e : j.at("phi")) {
        PiecewiseLinearFn f;
        f.t = e.at("t").get<std::vector<double>>();
        f.v = e.at("values").get<std::vector<double>>();
        f.check();
        s.phi_mean.emplace_back(e.at("k").get<int>(), std::move(f));
      }
    }
    if (j.contains("phi_fluct")) {
      for (const auto& e : j.at("phi_fluct"))
        s.phi_fluct.emplace_back(e.at("k").get<int>(), e.at("d").get<int>(),
                                 parse_step(e, s.weight.horizon, "phi_fluct entry"));
    }
    if (j.contains("noise")) {
      for (const auto& e : j.at("noise")) {
        Scenario::NoiseSpec spec;
        if (e.contains("beta_bar")) {
          spec.beta_bar = parse_linear_table(e.at("beta_bar"), "beta_bar");
          spec.has_beta_bar = true;
        }
        if (e.contains("beta")) {
          spec.beta = parse_linear_table(e.at("beta"), "beta");
          spec.has_beta = true;
        }
        if (e.contains("h")) {
          for (const auto& hm : e.at("h"))
            spec.h_modes.emplace_back(hm.at("k").get<int>(), parse_step(hm, s.weight.horizon, "h entry"));
        }
        s.noise.push_back(std::move(spec));
      }
    }
    if (j.contains("mu")) {
      s.mu = parse_linear_table(j.at("mu"), "mu");
      s.has_mu = true;
    }
    if (j.contains("beta_profiles")) {
      for (const auto& e : j.at("beta_profiles"))
        s.beta_profiles.push_back(parse_step(e, s.weight.horizon, "beta profile"));
    }
    if (j.contains("phi_backward")) {
      for (const auto& e : j.at("phi_backward"))
        s.phi_backward.emplace_back(e.at("k").get<int>(), parse_step(e, s.weight.horizon, "phi_backward entry"));
    }
    if (j.contains("psi")) {
      s.psi = parse_rep(j.at("psi"), s.modes, s.weight.horizon, "psi");
      s.has_psi = true;
    }
    if (j.contains("alpha")) {
      s.alpha = parse_rep(j.at("alpha"), s.modes, s.weight.horizon, "alpha");
      s.has_alpha = true;
    }
    if (j.contains("roundtrip") && j.at("roundtrip").contains("alpha")) {
      s.alpha = parse_rep(j.at("roundtrip").at("alpha"), s.modes, s.weight.horizon, "roundtrip.alpha");
      s.has_alpha = true;
    }

    if (j.contains("mc")) {
      const json& mc = j.at("mc");
      s.mc.paths = mc.value("paths", s.mc.paths);
      s.mc.steps = mc.value("steps", s.mc.steps);
      s.mc.seed = mc.value("seed", s.mc.seed);
      s.mc.workers = mc.value("workers", s.mc.workers);
      s.mc.store_paths = mc.value("store_paths", s.mc.store_paths);
    }
    if (j.contains("tolerances")) {
      const json& t = j.at("tolerances");
      s.tol.gram = t.value("gram", s.tol.gram);
      s.tol.eigen_residual = t.value("eigen_residual", s.tol.eigen_residual);
      s.tol.forward_residual = t.value("forward_residual", s.tol.forward_residual);
      s.tol.backward_identity = t.value("backward_identity", s.tol.backward_identity);
      s.tol.semigroup = t.value("semigroup", s.tol.semigroup);
      s.tol.condition_residual = t.value("condition_residual", s.tol.condition_residual);
      s.tol.roundtrip = t.value("roundtrip", s.tol.roundtrip);
      s.tol.recovery_roundtrip = t.value("recovery_roundtrip", s.tol.recovery_roundtrip);
      s.tol.terminal_identity = t.value("terminal_identity", s.tol.terminal_identity);
      s.tol.linearity = t.value("linearity", s.tol.linearity);
      s.tol.tail_fraction = t.value("tail_fraction", s.tol.tail_fraction);
      s.tol.overflow_bound = t.value("overflow_bound", s.tol.overflow_bound);
      s.tol.shift_floor = t.value("shift_floor", s.tol.shift_floor);
      s.tol.coercivity_floor = t.value("coercivity_floor", s.tol.coercivity_floor);
    }
    s.output_dir = j.value("output_dir", std::string());
  } catch (const json::exception& e) {
    throw ValidationError(ErrorKind::BadConfig, "scenario field error: " + std::string(e.what()));
  }
  return s;
}

BuiltScenario build_scenario(const Scenario& s, const RunOverrides& o, bool require_valid_weight) {
  BuiltScenario b;
  b.grid = Grid1D::make(s.length, s.interior_nodes);

  double shift = s.shift;
  if (s.auto_shift) {
    EllipticOperator probe = assemble_operator(b.grid, s.diffusion, s.zero_order, 0.0);
    shift = choose_shift(probe, s.tol.shift_floor);
  }
  b.op = assemble_operator(b.grid, s.diffusion, s.zero_order, shift);
  if (s.modes < 1 || s.modes > s.interior_nodes)
    throw ValidationError(ErrorKind::BadConfig, "modes must lie in [1, interior_nodes]");
  b.basis = eigendecompose(b.op, s.modes);

  const int K = s.modes;
  const int n = b.grid.n_interior;

  WeightReport wr = validate(s.weight);
  if (require_valid_weight && !wr.valid() && !o.allow_ill_posed)
    throw ValidationError(ErrorKind::IllPosedWeight,
                          "weight rejected (" + wr.detail +
                              "); rerun with --allow-ill-posed to study the excluded case");

  if (s.weight.direction == NonlocalWeight::Direction::Forward) {
    ForwardProblem& p = b.forward;
    p.basis = b.basis;
    p.op = b.op;
    p.weight = s.weight;
    p.theta = s.theta_given ? s.theta : (s.weight.kappa == 0.0 ? s.weight.horizon : 0.0);
    p.coercivity_floor = s.tol.coercivity_floor;
    p.overflow_bound = s.tol.overflow_bound;
    if (!s.phi_mean.empty()) {
      p.phi_mean.resize(static_cast<size_t>(K));
      for (const auto& [k, fn] : s.phi_mean) {
        if (k < 1 || k > K)
          throw ValidationError(ErrorKind::BadConfig, "phi references mode outside 1..modes");
        p.phi_mean[static_cast<size_t>(k - 1)] = fn;
      }
    }
    const int N = static_cast<int>(s.noise.size());
    for (const auto& spec : s.noise) {
      ForwardNoise c;
      if (spec.has_beta_bar) {
        c.beta_bar_nodes.resize(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) c.beta_bar_nodes[static_cast<size_t>(i)] = spec.beta_bar(b.grid.node(i));
      }
      if (spec.has_beta) {
        c.beta_nodes.resize(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) c.beta_nodes[static_cast<size_t>(i)] = spec.beta(b.grid.node(i));
      }
      if (!spec.h_modes.empty()) {
        c.h_modes.resize(static_cast<size_t>(K));
        for (const auto& [k, f] : spec.h_modes) {
          if (k < 1 || k > K)
            throw ValidationError(ErrorKind::BadConfig, "h references mode outside 1..modes");
          c.h_modes[static_cast<size_t>(k - 1)] = f;
        }
      }
      p.noise.push_back(std::move(c));
    }
    if (!s.phi_fluct.empty()) {
      p.phi_fluct.assign(static_cast<size_t>(K), std::vector<StepFunction>(static_cast<size_t>(std::max(N, 1))));
      for (const auto& [k, d, f] : s.phi_fluct) {
        if (k < 1 || k > K || d < 1 || d > std::max(N, 1))
          throw ValidationError(ErrorKind::BadConfig, "phi_fluct indices out of range");
        p.phi_fluct[static_cast<size_t>(k - 1)][static_cast<size_t>(d - 1)] = f;
      }
    }
    validate_forward_problem(p);
  } else {
    if (!s.noise.empty())
      throw ValidationError(ErrorKind::UnsupportedNoise,
                            "the backward problem takes deterministic time profiles (beta_profiles), "
                            "not x-dependent noise operators");
    BackwardProblem& p = b.backward;
    p.basis = b.basis;
    p.weight = s.weight;
    p.epsilon = s.epsilon;
    p.theta = s.theta_given ? s.theta : (s.weight.kappa == 0.0 ? 0.0 : s.weight.horizon);
    p.overflow_bound = s.tol.overflow_bound;
    p.beta_profiles = s.beta_profiles;
    if (!s.phi_backward.empty()) {
      p.phi_modes.resize(static_cast<size_t>(K));
      for (const auto& [k, f] : s.phi_backward) {
        if (k < 1 || k > K)
          throw ValidationError(ErrorKind::BadConfig, "phi_backward references mode outside 1..modes");
        p.phi_modes[static_cast<size_t>(k - 1)] = f;
      }
    }
  }
  return b;
}

namespace {

std::vector<double> sample_field(const LinearTable& t, const Grid1D& grid) {
  std::vector<double> f(static_cast<size_t>(grid.n_interior));
  for (int i = 0; i < grid.n_interior; ++i) f[static_cast<size_t>(i)] = t(grid.node(i));
  return f;
}

void write_report(const std::filesystem::path& dir, const ResidualReport& rep,
                  std::vector<std::filesystem::path>& files) {
  CsvWriter w(dir / "report.csv", {"metric", "value", "tolerance", "pass"});
  for (const auto& m : rep.metrics)
    w.row({m.name, format_double(m.value), std::isnan(m.tolerance) ? "" : format_double(m.tolerance),
           m.pass < 0 ? "" : std::to_string(m.pass)});
  w.close();
  files.push_back(dir / "report.csv");
}

void write_basis_csv(const std::filesystem::path& dir, const SpectralBasis& basis,
                     std::vector<std::filesystem::path>& files) {
  CsvWriter w(dir / "basis.csv", {"k", "lambda", "node", "x", "value"});
  for (int k = 0; k < basis.mode_count; ++k) {
    auto v = basis.mode(k);
    for (int i = 0; i < basis.grid.n_interior; ++i)
      w.row({std::to_string(k + 1), format_double(basis.eigenvalues[static_cast<size_t>(k)]),
             std::to_string(i + 1), format_double(basis.grid.node(i)),
             format_double(v[static_cast<size_t>(i)])});
  }
  w.close();
  files.push_back(dir / "basis.csv");
}

void write_field_csv(const std::filesystem::path& dir, const std::string& name, const Grid1D& grid,
                     std::span<const double> field, std::vector<std::filesystem::path>& files) {
  CsvWriter w(dir / name, {"node", "x", "value"});
  for (int i = 0; i < grid.n_interior; ++i)
    w.row({std::to_string(i + 1), format_double(grid.node(i)), format_double(field[static_cast<size_t>(i)])});
  w.close();
  files.push_back(dir / name);
}

void write_recovery_csv(const std::filesystem::path& dir, const SpectralBasis& basis,
                        const RecoveryResult& rec, std::vector<std::filesystem::path>& files) {
  CsvWriter w(dir / "recovery.csv", {"k", "lambda", "multiplier", "amplification", "xi"});
  for (int k = 0; k < basis.mode_count; ++k)
    w.row({std::to_string(k + 1), format_double(basis.eigenvalues[static_cast<size_t>(k)]),
           format_double(rec.multipliers[static_cast<size_t>(k)]),
           format_double(rec.amplification[static_cast<size_t>(k)]),
           format_double(rec.xi[static_cast<size_t>(k)])});
  w.close();
  files.push_back(dir / "recovery.csv");
}

void write_mean_field_csv(const std::filesystem::path& dir, const SpectralBasis& basis,
                          const MeanTrajectory& mean, std::vector<std::filesystem::path>& files) {
  CsvWriter w(dir / "mean_field.csv", {"t", "node", "value"});
  int stride = std::max(1, mean.tgrid.steps / 200);
  std::vector<double> coeffs(static_cast<size_t>(mean.modes));
  for (int j = 0; j <= mean.tgrid.steps; j += stride) {
    for (int k = 0; k < mean.modes; ++k) coeffs[static_cast<size_t>(k)] = mean.at(k, j);
    std::vector<double> field = lift(coeffs, basis);
    for (int i = 0; i < basis.grid.n_interior; ++i)
      w.row({format_double(mean.tgrid.knot(j)), std::to_string(i + 1),
             format_double(field[static_cast<size_t>(i)])});
  }
  w.close();
  files.push_back(dir / "mean_field.csv");
}

void write_conditioning_csv(const std::filesystem::path& dir, const ConditioningTable& table,
                            std::vector<std::filesystem::path>& files) {
  CsvWriter w(dir / "conditioning.csv", {"k", "lambda", "multiplier", "amplification", "q0"});
  for (const auto& r : table.rows)
    w.row({std::to_string(r.mode), format_double(r.lambda), format_double(r.multiplier),
           format_double(r.amplification), format_double(r.q0)});
  w.close();
  files.push_back(dir / "conditioning.csv");
}

// verify battery: every check the scenario data supports, at the configured
// tolerances
ResidualReport run_verify_battery(const Scenario& s, const BuiltScenario& b, const RunOverrides& o,
                                  const std::filesystem::path& dir,
                                  std::vector<std::filesystem::path>& files) {
  ResidualReport rep;
  const int workers = o.workers.value_or(s.mc.workers);
  const double T = s.weight.horizon;

  rep.check("basis_gram_deviation", gram_deviation(b.basis), s.tol.gram);
  rep.check("basis_eigen_residual_rel", max_eigen_residual(b.op, b.basis), s.tol.eigen_residual);
  rep.info("lambda_min", b.basis.eigenvalues.front());
  rep.info("spectral_shift", b.basis.shift);

  WeightReport wr = validate(s.weight);
  rep.check("weight_invalid", wr.valid() ? 0.0 : 1.0, o.allow_ill_posed ? 1.0 : 0.0);
  rep.info("weight_t1", wr.t1);

  ConditioningTable cond = conditioning_report(b.basis, s.weight);
  write_conditioning_csv(dir, cond, files);
  rep.info("conditioning_exponential", cond.exponential_growth ? 1.0 : 0.0);

  TimeGrid tgrid = TimeGrid::make(T, s.mc.steps);

  if (s.weight.direction == NonlocalWeight::Direction::Forward) {
    const ForwardProblem& p = b.forward;
    rep.info("superparabolicity_margin", superparabolicity_margin(b.op, p.noise));

    // recovery round trip on a synthetic initial field
    std::vector<double> xi_star(static_cast<size_t>(s.modes));
    for (int k = 0; k < s.modes; ++k) xi_star[static_cast<size_t>(k)] = 1.0 / double((k + 1) * (k + 1));
    std::vector<double> mu_modes = apply_M0(b.basis, s.weight, xi_star);
    std::vector<double> mphi = apply_M(b.basis, s.weight, p.phi_mean);
    for (int k = 0; k < s.modes; ++k) mu_modes[static_cast<size_t>(k)] += mphi[static_cast<size_t>(k)];
    std::vector<double> mu_field = lift(mu_modes, b.basis);
    RecoveryOptions ropts;
    ropts.allow_ill_posed = o.allow_ill_posed;
    ropts.tail_warn_fraction = s.tol.tail_fraction;
    RecoveryResult rec = recover_initial(mu_field, p.phi_mean, b.basis, s.weight, ropts);
    double err = 0.0, nrm = 0.0;
    for (int k = 0; k < s.modes; ++k) {
      err += (rec.xi[static_cast<size_t>(k)] - xi_star[static_cast<size_t>(k)]) *
             (rec.xi[static_cast<size_t>(k)] - xi_star[static_cast<size_t>(k)]);
      nrm += xi_star[static_cast<size_t>(k)] * xi_star[static_cast<size_t>(k)];
    }
    rep.check("recovery_roundtrip_rel", std::sqrt(err / nrm), s.tol.recovery_roundtrip);

    // linearity of the recovery map
    std::vector<double> mu2(mu_field.size());
    for (size_t i = 0; i < mu_field.size(); ++i) mu2[i] = 2.0 * mu_field[i];
    std::vector<PiecewiseLinearFn> no_phi;
    RecoveryResult rec1 = recover_initial(mu_field, no_phi, b.basis, s.weight, ropts);
    RecoveryResult rec2 = recover_initial(mu2, no_phi, b.basis, s.weight, ropts);
    double lin = 0.0;
    for (int k = 0; k < s.modes; ++k)
      lin = std::max(lin, std::abs(rec2.xi[static_cast<size_t>(k)] - 2.0 * rec1.xi[static_cast<size_t>(k)]) /
                              std::max(1.0, std::abs(rec1.xi[static_cast<size_t>(k)])));
    rep.check("recovery_linearity_rel", lin, s.tol.linearity);

    // simulation block
    SimOptions sopts;
    sopts.workers = workers;
    sopts.store_paths = s.mc.store_paths;
    WienerEnsemble wiener(s.mc.seed, s.mc.paths, std::max(1, static_cast<int>(p.noise.size())), tgrid);
    ModeEnsemble ens = simulate_forward(p, rec.xi, wiener, sopts);
    if (ens.paths_stored > 0)
      rep.check("forward_integral_residual", forward_integral_residual(ens, p), s.tol.forward_residual);

    NonlocalAverage avg = nonlocal_average(ens, s.weight);
    double worst_gap = 0.0;
    for (int k = 0; k < s.modes; ++k) {
      double se = avg.se_valid ? avg.se[static_cast<size_t>(k)] : 0.0;
      double gap = std::abs(avg.mean[static_cast<size_t>(k)] - mu_modes[static_cast<size_t>(k)]);
      if (se > 0.0) worst_gap = std::max(worst_gap, gap / se);
    }
    rep.check("mc_mean_consistency_sigmas", worst_gap, 4.0);

    rep.check("semigroup_restart_forward",
              semigroup_restart_forward(p, rec.xi, WienerEnsemble(s.mc.seed, std::min(s.mc.paths, 16),
                                                                  wiener.components(), tgrid),
                                        tgrid.knot(tgrid.steps / 2)),
              s.tol.semigroup);

    // determinism: workers 1 vs configured, and a repeated run
    SimOptions s1 = sopts;
    s1.workers = 1;
    ModeEnsemble e1 = simulate_forward(p, rec.xi, wiener, s1);
    SimOptions s2 = sopts;
    s2.workers = std::max(2, workers);
    ModeEnsemble e2 = simulate_forward(p, rec.xi, wiener, s2);
    bool same = e1.condition_acc == e2.condition_acc && e1.terminal == e2.terminal;
    ModeEnsemble e3 = simulate_forward(p, rec.xi, wiener, s2);
    bool same_rerun = e2.condition_acc == e3.condition_acc && e2.terminal == e3.terminal;
    rep.check("determinism_workers", same ? 0.0 : 1.0, 0.0);
    rep.check("determinism_rerun", same_rerun ? 0.0 : 1.0, 0.0);

    // empirical stability of the recovery map (reported, not asserted: the
    // continuum bound only asserts existence of a constant)
    auto recovery_map = [&](const std::vector<double>& mu_in) {
      RecoveryResult r = recover_initial(lift(mu_in, b.basis), p.phi_mean, b.basis, s.weight, ropts);
      return r.xi;
    };
    StabilityResult stab = stability_probe(recovery_map, mu_modes, 1e-4, 5, s.mc.seed);
    rep.info("stability_max_ratio", stab.max_ratio);
  } else {
    const BackwardProblem& p = b.backward;
    if (s.has_psi) {
      BackwardOptions bopts;
      bopts.workers = workers;
      bopts.store_paths = s.mc.store_paths;
      bopts.allow_ill_posed = o.allow_ill_posed;
      int comps = std::max({1, static_cast<int>(p.beta_profiles.size()), s.psi.components()});
      WienerEnsemble wiener(s.mc.seed, s.mc.paths, comps, tgrid);
      BackwardSolution sol = solve_backward_nonlocal(s.psi, p, wiener, bopts);

      double worst = 0.0, mean_res = 0.0;
      for (double r : sol.condition_residual) {
        worst = std::max(worst, r);
        mean_res += r;
      }
      mean_res /= std::max<size_t>(1, sol.condition_residual.size());
      rep.check("condition_residual_max", worst, s.tol.condition_residual);
      rep.info("condition_residual_mean", mean_res);

      if (sol.paths_stored > 0) {
        BackwardResiduals br = backward_integral_residual(sol, p);
        rep.check("backward_identity_residual", br.identity, s.tol.backward_identity);
        rep.info("backward_euler_form_residual", br.euler_form);
        rep.info("bsde_step_residual", bsde_step_residual(sol, p));

        // terminal identity and the measurability margin
        double term = 0.0;
        for (int path = 0; path < sol.paths_stored; ++path)
          for (int k = 0; k < sol.modes; ++k)
            term = std::max(term, std::abs(sol.path_mode(path, k)[static_cast<size_t>(tgrid.steps)] -
                                           sol.alpha[static_cast<size_t>(path) * sol.modes + k]));
        rep.check("terminal_identity", term, s.tol.terminal_identity);
      }
      double margin_violation = 0.0;
      int j_eps = tgrid.knot_index(T - p.epsilon);
      for (int d = 0; d < sol.components; ++d)
        for (int k = 0; k < sol.modes; ++k) {
          auto u = sol.upsilon_mode(d, k);
          for (int j = j_eps; j <= tgrid.steps; ++j)
            margin_violation = std::max(margin_violation, std::abs(u[static_cast<size_t>(j)]));
        }
      rep.check("margin_upsilon_zero", margin_violation, 0.0);

      rep.check("semigroup_restart_backward",
                semigroup_restart_backward(s.psi, p,
                                           WienerEnsemble(s.mc.seed, std::min(s.mc.paths, 16), comps, tgrid),
                                           tgrid.knot(tgrid.steps / 2)),
                s.tol.semigroup);

      // empirical stability of the terminal-mean recovery (reported only)
      std::vector<double> means(static_cast<size_t>(s.modes));
      for (int k = 0; k < s.modes; ++k) means[static_cast<size_t>(k)] = s.psi.entries[static_cast<size_t>(k)].mean;
      auto mean_map = [&](const std::vector<double>& m) {
        std::vector<double> out(m.size());
        for (size_t k = 0; k < m.size(); ++k)
          out[k] = mean_level(s.weight, b.basis.eigenvalues[k], m[k]);
        return out;
      };
      StabilityResult stab = stability_probe(mean_map, means, 1e-4, 5, s.mc.seed);
      rep.info("stability_max_ratio", stab.max_ratio);

      // decay-weighted terminal second moment sum_k lambda_k^2 e^{-lambda_k T} E alpha_k^2
      double moment = 0.0;
      for (int k = 0; k < s.modes; ++k) {
        double ea2 = 0.0;
        for (int path = 0; path < sol.paths; ++path) {
          double a = sol.alpha[static_cast<size_t>(path) * s.modes + k];
          ea2 += a * a;
        }
        ea2 /= std::max(1, sol.paths);
        double lam = b.basis.eigenvalues[static_cast<size_t>(k)];
        moment += lam * lam * std::exp(-lam * T) * ea2;
      }
      rep.info("decay_weighted_terminal_moment", moment);

      for (const auto& wmsg : sol.warnings) std::cerr << "warning: " << wmsg << "\n";
    }
  }
  return rep;
}

}  // namespace

int run_scenario(ScenarioKind kind, const Scenario& s, const RunOverrides& o) {
  std::filesystem::path dir = resolve_out_dir(s, o);
  bool verify_failed = false;
  try {
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> files;
    BuiltScenario b = build_scenario(s, o, /*require_valid_weight=*/kind != ScenarioKind::Eig);
    const int workers = o.workers.value_or(s.mc.workers);
    const double T = s.weight.horizon;

    switch (kind) {
      case ScenarioKind::Eig: {
        write_basis_csv(dir, b.basis, files);
        ResidualReport rep;
        rep.info("gram_deviation", gram_deviation(b.basis));
        rep.info("eigen_residual_rel", max_eigen_residual(b.op, b.basis));
        rep.info("spectral_shift", b.basis.shift);
        rep.info("lambda_min", b.basis.eigenvalues.front());
        write_report(dir, rep, files);
        break;
      }
      case ScenarioKind::Conditioning: {
        ConditioningTable table = conditioning_report(b.basis, s.weight);
        write_conditioning_csv(dir, table, files);
        ResidualReport rep;
        rep.info("exponential_growth", table.exponential_growth ? 1.0 : 0.0);
        rep.info("max_amplification", table.rows.empty() ? 0.0 : table.rows.back().amplification);
        write_report(dir, rep, files);
        break;
      }
      case ScenarioKind::ForwardRecover: {
        if (!s.has_mu) throw ValidationError(ErrorKind::BadConfig, "forward-recover needs a mu table");
        std::vector<double> mu_field = sample_field(s.mu, b.grid);
        RecoveryOptions ropts;
        ropts.allow_ill_posed = o.allow_ill_posed;
        ropts.tail_warn_fraction = s.tol.tail_fraction;
        RecoveryResult rec = recover_initial(mu_field, b.forward.phi_mean, b.basis, s.weight, ropts);
        std::vector<double> xi_field = lift(rec.xi, b.basis);
        write_field_csv(dir, "xi.csv", b.grid, xi_field, files);
        write_recovery_csv(dir, b.basis, rec, files);
        MeanTrajectory mean = mean_evolve(b.basis, rec.xi, b.forward.phi_mean, TimeGrid::make(T, s.mc.steps));
        write_mean_field_csv(dir, b.basis, mean, files);
        ResidualReport rep;
        rep.info("mu_norm", rec.mu_norm);
        rep.info("tail_norm", rec.tail_norm);
        rep.info("tail_warning", rec.tail_warning ? 1.0 : 0.0);
        rep.info("ill_posed_weight", rec.ill_posed ? 1.0 : 0.0);
        write_report(dir, rep, files);
        if (rec.tail_warning)
          std::cerr << "warning: mu has a tail of norm " << rec.tail_norm
                    << " outside the retained modes\n";
        break;
      }
      case ScenarioKind::ForwardSolve: {
        if (!s.has_mu) throw ValidationError(ErrorKind::BadConfig, "forward-solve needs a mu table");
        std::vector<double> mu_field = sample_field(s.mu, b.grid);
        SimOptions sopts;
        sopts.workers = workers;
        sopts.store_paths = s.mc.store_paths;
        RecoveryOptions ropts;
        ropts.allow_ill_posed = o.allow_ill_posed;
        ropts.tail_warn_fraction = s.tol.tail_fraction;
        WienerEnsemble wiener(s.mc.seed, s.mc.paths,
                              std::max(1, static_cast<int>(b.forward.noise.size())),
                              TimeGrid::make(T, s.mc.steps));
        ForwardSolveResult res = solve_forward_nonlocal(mu_field, b.forward, wiener, sopts, ropts);
        std::vector<double> xi_field = lift(res.recovery.xi, b.basis);
        write_field_csv(dir, "xi.csv", b.grid, xi_field, files);
        write_recovery_csv(dir, b.basis, res.recovery, files);
        MeanTrajectory mean = mean_evolve(b.basis, res.recovery.xi, b.forward.phi_mean, wiener.grid());
        write_mean_field_csv(dir, b.basis, mean, files);
        {
          CsvWriter w(dir / "average.csv", {"k", "mean", "se"});
          for (int k = 0; k < s.modes; ++k)
            w.row({std::to_string(k + 1), format_double(res.average.mean[static_cast<size_t>(k)]),
                   res.average.se_valid ? format_double(res.average.se[static_cast<size_t>(k)]) : "nan"});
          w.close();
          files.push_back(dir / "average.csv");
        }
        ResidualReport rep;
        rep.info("recovery_residual", res.recovery_residual);
        rep.info("max_h_norm", res.max_h_norm);
        rep.info("max_grad_norm", res.max_grad_norm);
        rep.info("superparabolicity_margin", res.superparabolicity);
        rep.info("tail_norm", res.recovery.tail_norm);
        if (res.ensemble.paths_stored > 0)
          rep.info("forward_integral_residual", forward_integral_residual(res.ensemble, b.forward));
        write_report(dir, rep, files);
        break;
      }
      case ScenarioKind::BackwardSolve: {
        if (!s.has_psi) throw ValidationError(ErrorKind::BadConfig, "backward-solve needs a psi representation");
        BackwardOptions bopts;
        bopts.workers = workers;
        bopts.store_paths = s.mc.store_paths;
        bopts.allow_ill_posed = o.allow_ill_posed;
        int comps = std::max({1, static_cast<int>(b.backward.beta_profiles.size()), s.psi.components()});
        WienerEnsemble wiener(s.mc.seed, s.mc.paths, comps, TimeGrid::make(T, s.mc.steps));
        BackwardSolution sol = solve_backward_nonlocal(s.psi, b.backward, wiener, bopts);
        for (const auto& wmsg : sol.warnings) std::cerr << "warning: " << wmsg << "\n";

        {
          CsvWriter w(dir / "condition_residual.csv", {"path", "residual", "psi_norm"});
          for (int path = 0; path < sol.paths; ++path)
            w.row({std::to_string(path), format_double(sol.condition_residual[static_cast<size_t>(path)]),
                   format_double(sol.psi_norm[static_cast<size_t>(path)])});
          w.close();
          files.push_back(dir / "condition_residual.csv");
        }
        {
          std::vector<std::string> head{"path", "t", "k", "y"};
          for (int d = 0; d < sol.components; ++d) head.push_back("upsilon_" + std::to_string(d + 1));
          CsvWriter w(dir / "trajectory.csv", head);
          int stride = std::max(1, sol.tgrid.steps / 200);
          int shown = std::min(sol.paths_stored, 8);
          for (int path = 0; path < shown; ++path)
            for (int k = 0; k < sol.modes; ++k) {
              auto y = sol.path_mode(path, k);
              for (int j = 0; j <= sol.tgrid.steps; j += stride) {
                std::vector<std::string> row{std::to_string(path), format_double(sol.tgrid.knot(j)),
                                             std::to_string(k + 1), format_double(y[static_cast<size_t>(j)])};
                for (int d = 0; d < sol.components; ++d)
                  row.push_back(format_double(sol.upsilon_mode(d, k)[static_cast<size_t>(j)]));
                w.row(row);
              }
            }
          w.close();
          files.push_back(dir / "trajectory.csv");
        }
        {
          CsvWriter w(dir / "representation.csv",
                      {"k", "lambda", "ybar", "det_shift", "psi_phi", "integrand_bound"});
          for (int k = 0; k < sol.modes; ++k)
            w.row({std::to_string(k + 1), format_double(b.basis.eigenvalues[static_cast<size_t>(k)]),
                   format_double(sol.ybar[static_cast<size_t>(k)]),
                   format_double(sol.det_shift[static_cast<size_t>(k)]),
                   format_double(sol.psi_phi[static_cast<size_t>(k)]),
                   format_double(sol.integrand_bounds[static_cast<size_t>(k)])});
          w.close();
          files.push_back(dir / "representation.csv");
        }
        ResidualReport rep;
        double worst = 0.0, mean_res = 0.0;
        for (double r : sol.condition_residual) {
          worst = std::max(worst, r);
          mean_res += r;
        }
        rep.info("condition_residual_max", worst);
        rep.info("condition_residual_mean", mean_res / std::max<size_t>(1, sol.condition_residual.size()));
        if (sol.paths_stored > 0) {
          BackwardResiduals br = backward_integral_residual(sol, b.backward);
          rep.info("backward_identity_residual", br.identity);
          rep.info("backward_euler_form_residual", br.euler_form);
        }
        write_report(dir, rep, files);
        break;
      }
      case ScenarioKind::Roundtrip: {
        if (!s.has_alpha)
          throw ValidationError(ErrorKind::BadConfig, "roundtrip needs a terminal representation (alpha)");
        BackwardOptions bopts;
        bopts.workers = workers;
        bopts.allow_ill_posed = o.allow_ill_posed;
        int comps = std::max({1, static_cast<int>(b.backward.beta_profiles.size()), s.alpha.components()});
        TimeGrid tgrid = TimeGrid::make(T, s.mc.steps);
        WienerEnsemble wiener(s.mc.seed, s.mc.paths, comps, tgrid);

        BackwardSolution generated = backward_cauchy(s.alpha, b.backward, wiener, bopts);
        RandomFieldRep psi = condition_representation(s.alpha, b.backward, tgrid);
        BackwardSolution recovered = solve_backward_nonlocal(psi, b.backward, wiener, bopts);

        double ybar_err = 0.0, yhat_err = 0.0, alpha_err = 0.0;
        for (int k = 0; k < s.modes; ++k) {
          double target = s.alpha.entries[static_cast<size_t>(k)].mean;
          ybar_err = std::max(ybar_err, std::abs(recovered.ybar[static_cast<size_t>(k)] - target));
          for (int d = 0; d < recovered.components; ++d) {
            auto rj = recovered.yhat(k, d);
            const auto& orig = s.alpha.entries[static_cast<size_t>(k)].integrands;
            std::vector<double> gj(static_cast<size_t>(tgrid.steps), 0.0);
            if (static_cast<size_t>(d) < orig.size() && !orig[static_cast<size_t>(d)].empty())
              gj = sample_steps(orig[static_cast<size_t>(d)], tgrid);
            for (int j = 0; j < tgrid.steps; ++j)
              yhat_err = std::max(yhat_err, std::abs(rj[static_cast<size_t>(j)] - gj[static_cast<size_t>(j)]));
          }
        }
        for (size_t i = 0; i < generated.alpha.size(); ++i)
          alpha_err = std::max(alpha_err, std::abs(generated.alpha[i] - recovered.alpha[i]));

        ResidualReport rep;
        rep.check("roundtrip_ybar_err", ybar_err, s.tol.roundtrip);
        rep.check("roundtrip_yhat_err", yhat_err, s.tol.roundtrip);
        rep.check("roundtrip_alpha_err", alpha_err, s.tol.roundtrip);
        write_report(dir, rep, files);
        verify_failed = !rep.all_pass();
        break;
      }
      case ScenarioKind::Verify: {
        ResidualReport rep = run_verify_battery(s, b, o, dir, files);
        write_report(dir, rep, files);
        verify_failed = !rep.all_pass();
        break;
      }
    }
    write_manifest(dir, files);
  } catch (const ValidationError& e) {
    std::cerr << "validation failure: " << e.what() << "\n";
    return 2;
  } catch (const SolverError& e) {
    std::cerr << "solver error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return verify_failed ? 4 : 0;
}

int run_scenario_file(ScenarioKind kind, const std::filesystem::path& path, const RunOverrides& o) {
  try {
    Scenario s = load_scenario(path);
    return run_scenario(kind, s, o);
  } catch (const ValidationError& e) {
    std::cerr << "validation failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace nlspde
