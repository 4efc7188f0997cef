// Times the path-parallel Monte Carlo loop against the serial reference and
// checks that both produce identical results.

#include <chrono>
#include <cstdio>
#include <cstdlib>

#include "nlspde/forward.hpp"
#include "nlspde/parallel.hpp"

using namespace nlspde;

namespace {

double run_once(const ForwardProblem& p, std::span<const double> xi, const WienerEnsemble& wiener,
                int workers, ModeEnsemble* out) {
  SimOptions opts;
  opts.workers = workers;
  opts.store_paths = 0;
  auto t0 = std::chrono::steady_clock::now();
  ModeEnsemble ens = simulate_forward(p, xi, wiener, opts);
  auto t1 = std::chrono::steady_clock::now();
  if (out != nullptr) *out = std::move(ens);
  return std::chrono::duration<double>(t1 - t0).count();
}

}  // namespace

int main(int argc, char** argv) {
  int paths = argc > 1 ? std::atoi(argv[1]) : 4000;
  int steps = argc > 2 ? std::atoi(argv[2]) : 1000;
  int modes = argc > 3 ? std::atoi(argv[3]) : 8;

  Grid1D grid = Grid1D::make(3.14159265358979323846, 255);
  EllipticOperator op = assemble_operator(
      grid, [](double) { return 1.0; }, [](double) { return 0.0; }, 0.0);
  SpectralBasis basis = eigendecompose(op, modes);

  ForwardProblem p;
  p.basis = basis;
  p.op = op;
  p.weight.kappa = 0.0;
  p.weight.horizon = 1.0;
  p.weight.rho = StepFunction::constant(1.0, 0.0, 1.0);
  p.weight.direction = NonlocalWeight::Direction::Forward;
  p.theta = 1.0;
  ForwardNoise c;
  c.beta_nodes.assign(static_cast<size_t>(grid.n_interior), 0.2);
  c.h_modes.resize(static_cast<size_t>(modes));
  c.h_modes[0] = StepFunction::constant(1.0, 0.0, 1.0);
  p.noise.push_back(c);

  std::vector<double> xi(static_cast<size_t>(modes), 0.0);
  xi[0] = 1.0;
  WienerEnsemble wiener(42, paths, 1, TimeGrid::make(1.0, steps));

  std::printf("paths=%d steps=%d modes=%d hardware workers=%d\n", paths, steps, modes,
              hardware_workers());

  ModeEnsemble serial;
  double t_serial = run_once(p, xi, wiener, /*workers=*/0, &serial);
  std::printf("serial reference: %8.3f s  (%.0f paths/s)\n", t_serial, paths / t_serial);

  for (int w : {1, 2, hardware_workers()}) {
    ModeEnsemble par;
    double t = run_once(p, xi, wiener, w, &par);
    bool identical = par.condition_acc == serial.condition_acc && par.terminal == serial.terminal;
    std::printf("openmp %2d worker%s: %8.3f s  (%.0f paths/s, speedup %.2fx, %s)\n", w,
                w == 1 ? " " : "s", t, paths / t, t_serial / t,
                identical ? "bit-identical" : "MISMATCH");
    if (!identical) return 1;
  }
  return 0;
}
