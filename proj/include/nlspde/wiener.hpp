#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "nlspde/grid.hpp"
#include "nlspde/piecewise.hpp"

namespace nlspde {

// Wiener increments for P paths x N components x M steps. Paths are not
// materialized: path p is regenerated on demand as a pure function of
// (master seed, p), so results never depend on evaluation order or thread
// count. Increment layout within a path is [component][step].
class WienerEnsemble {
 public:
  WienerEnsemble(std::uint64_t seed, int paths, int components, TimeGrid grid);

  int paths() const { return paths_; }
  int components() const { return components_; }
  const TimeGrid& grid() const { return grid_; }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id(int path) const;

  // Fills out (size components*steps) with N(0, dt) increments.
  void path_increments(int path, std::span<double> out) const;
  std::vector<double> path_increments(int path) const;

 private:
  std::uint64_t seed_ = 0;
  int paths_ = 0;
  int components_ = 0;
  TimeGrid grid_;
};

// Pathwise discretized Ito integral sum_j g_j dw_j for a step-sampled
// deterministic integrand g (size M) against one component's increments.
double ito_integral(std::span<const double> step_values, std::span<const double> increments);

// log F(t_b, t_a) along one path for deterministic step profiles beta_d:
//   log F = sum_d [ sum_j beta_dj dw_dj - 1/2 sum_j beta_dj^2 dt ]
// over steps j in [a, b). `beta` is N x M row-major, `increments` likewise.
double log_kernel_factor(std::span<const double> beta, std::span<const double> increments,
                         const TimeGrid& grid, int knot_a, int knot_b);

double kernel_F(std::span<const double> beta, std::span<const double> increments,
                const TimeGrid& grid, int knot_a, int knot_b);

// Phi(lambda; t_b, t_a) = e^{-lambda (t_b - t_a)} F(t_b, t_a).
double kernel_Phi(double lambda, std::span<const double> beta, std::span<const double> increments,
                  const TimeGrid& grid, int knot_a, int knot_b);

// E F(T,0)^2 for deterministic profiles: exp(sum_d int beta_d^2 dt).
double kernel_cF(std::span<const double> beta, const TimeGrid& grid);

}  // namespace nlspde
