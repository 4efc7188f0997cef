#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "nlspde/scenario.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Spectral solver for parabolic SPDEs with time-averaged data in place of a Cauchy condition"};
  app.require_subcommand(1);

  std::string config;
  std::string out_dir;
  bool allow_ill_posed = false;
  int workers = -1;

  const char* names[] = {"eig",       "forward-recover", "forward-solve", "backward-solve",
                         "roundtrip", "conditioning",    "verify"};
  const char* help[] = {
      "assemble the operator and dump its eigenbasis",
      "recover the initial field from the averaged observable",
      "recover the initial field and run the Monte Carlo simulation",
      "solve the backward problem from a psi representation",
      "generate a terminal value, form its averaged observable, recover it back",
      "tabulate the per-mode multipliers and amplification factors",
      "run the full check battery against the configured tolerances",
  };
  for (size_t i = 0; i < std::size(names); ++i) {
    CLI::App* sub = app.add_subcommand(names[i], help[i]);
    sub->add_option("--config", config, "scenario JSON file")->required();
    sub->add_option("--out", out_dir, "output directory (default: scenario output_dir, then $NONLOCAL_SPDE_OUT, then ./out)");
    sub->add_flag("--allow-ill-posed", allow_ill_posed, "admit weights rejected by the validity rules");
    sub->add_option("--workers", workers, "worker threads for the path loops (0 = serial reference)");
  }

  CLI11_PARSE(app, argc, argv);

  CLI::App* sub = app.get_subcommands().front();
  nlspde::RunOverrides overrides;
  if (!out_dir.empty()) overrides.out_dir = out_dir;
  overrides.allow_ill_posed = allow_ill_posed;
  if (workers >= 0) overrides.workers = workers;

  try {
    nlspde::ScenarioKind kind = nlspde::parse_kind(sub->get_name());
    return nlspde::run_scenario_file(kind, config, overrides);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
