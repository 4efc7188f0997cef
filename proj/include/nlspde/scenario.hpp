#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "nlspde/backward.hpp"
#include "nlspde/forward.hpp"
#include "nlspde/verify.hpp"

namespace nlspde {

// Check tolerances; every value can be overridden from the scenario file
// ("tolerances" object). Defaults are documented in the README.
struct Tolerances {
  double gram = 1e-10;
  double eigen_residual = 1e-8;
  double forward_residual = 1e-10;
  double backward_identity = 1e-10;
  double semigroup = 1e-10;
  double condition_residual = 5e-3;
  double roundtrip = 1e-8;
  double recovery_roundtrip = 1e-10;
  double terminal_identity = 1e-12;
  double linearity = 1e-10;
  double tail_fraction = 0.1;
  double overflow_bound = 1e12;
  double shift_floor = 1e-6;
  double coercivity_floor = 0.0;
};

struct McConfig {
  int paths = 256;
  int steps = 200;
  std::uint64_t seed = 1;
  int workers = 1;
  int store_paths = -1;
};

enum class ScenarioKind {
  Eig,
  ForwardRecover,
  ForwardSolve,
  BackwardSolve,
  Roundtrip,
  Conditioning,
  Verify,
};

ScenarioKind parse_kind(const std::string& name);

struct Scenario {
  // operator and basis
  double length = 0.0;
  int interior_nodes = 0;
  LinearTable diffusion;
  LinearTable zero_order;
  bool auto_shift = true;
  double shift = 0.0;
  int modes = 0;

  NonlocalWeight weight;
  double theta = 0.0;
  bool theta_given = false;
  double epsilon = 0.0;

  // forward data
  std::vector<std::pair<int, PiecewiseLinearFn>> phi_mean;              // 1-based mode index
  std::vector<std::tuple<int, int, StepFunction>> phi_fluct;            // (k, d, integrand)
  struct NoiseSpec {
    LinearTable beta_bar;
    bool has_beta_bar = false;
    LinearTable beta;
    bool has_beta = false;
    std::vector<std::pair<int, StepFunction>> h_modes;  // 1-based mode index
  };
  std::vector<NoiseSpec> noise;
  bool has_mu = false;
  LinearTable mu;

  // backward data
  std::vector<StepFunction> beta_profiles;
  std::vector<std::pair<int, StepFunction>> phi_backward;
  bool has_psi = false;
  RandomFieldRep psi;
  bool has_alpha = false;
  RandomFieldRep alpha;

  McConfig mc;
  Tolerances tol;
  std::string output_dir;
};

Scenario load_scenario(const std::filesystem::path& path);

struct RunOverrides {
  std::optional<std::string> out_dir;
  bool allow_ill_posed = false;
  std::optional<int> workers;
};

// Objects assembled from a scenario (shared by the CLI and the tests).
struct BuiltScenario {
  Grid1D grid;
  EllipticOperator op;
  SpectralBasis basis;
  ForwardProblem forward;   // populated when the weight direction is forward
  BackwardProblem backward; // populated when the weight direction is backward
};

BuiltScenario build_scenario(const Scenario& s, const RunOverrides& o = {},
                             bool require_valid_weight = true);

// Dispatch: writes the declared CSV artifacts plus manifest.csv into the
// output directory. Returns the process exit code (0 ok, 2 validation
// failure, 3 solver error, 4 check failure in verify mode).
int run_scenario(ScenarioKind kind, const Scenario& s, const RunOverrides& o);
int run_scenario_file(ScenarioKind kind, const std::filesystem::path& path, const RunOverrides& o);

}  // namespace nlspde
