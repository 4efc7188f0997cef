#include "nlspde/wiener.hpp"

#include <cmath>

namespace nlspde {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// xoshiro256** seeded via splitmix64; small, fast, and fully specified here
// so streams are identical on every platform and standard library.
struct Xoshiro256 {
  std::uint64_t s[4];

  explicit Xoshiro256(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s) w = splitmix64(sm);
  }

  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t next() {
    std::uint64_t result = rotl(s[1] * 5, 7) * 9;
    std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }

  // uniform in (0, 1), never exactly 0
  double uniform() { return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53; }
};

}  // namespace

WienerEnsemble::WienerEnsemble(std::uint64_t seed, int paths, int components, TimeGrid grid)
    : seed_(seed), paths_(paths), components_(components), grid_(grid) {
  if (paths < 1) throw ValidationError(ErrorKind::BadConfig, "need at least one path");
  if (components < 0) throw ValidationError(ErrorKind::BadConfig, "negative component count");
}

std::uint64_t WienerEnsemble::stream_id(int path) const {
  std::uint64_t st = seed_ ^ (0x6a09e667f3bcc909ull + static_cast<std::uint64_t>(path) * 0x9e3779b97f4a7c15ull);
  return splitmix64(st);
}

void WienerEnsemble::path_increments(int path, std::span<double> out) const {
  const size_t need = static_cast<size_t>(components_) * static_cast<size_t>(grid_.steps);
  if (out.size() != need)
    throw SolverError(ErrorKind::ShapeMismatch, "increment buffer size mismatch");
  Xoshiro256 rng(stream_id(path));
  const double sdt = std::sqrt(grid_.dt);
  // Box-Muller in pairs, consumed in a fixed order
  size_t i = 0;
  while (i < need) {
    double u1 = rng.uniform();
    double u2 = rng.uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    out[i++] = r * std::cos(kTwoPi * u2) * sdt;
    if (i < need) out[i++] = r * std::sin(kTwoPi * u2) * sdt;
  }
}

std::vector<double> WienerEnsemble::path_increments(int path) const {
  std::vector<double> buf(static_cast<size_t>(components_) * static_cast<size_t>(grid_.steps));
  path_increments(path, buf);
  return buf;
}

double ito_integral(std::span<const double> step_values, std::span<const double> increments) {
  if (step_values.size() != increments.size())
    throw SolverError(ErrorKind::ShapeMismatch, "integrand/increment length mismatch");
  double acc = 0.0;
  for (size_t j = 0; j < step_values.size(); ++j) acc += step_values[j] * increments[j];
  return acc;
}

double log_kernel_factor(std::span<const double> beta, std::span<const double> increments,
                         const TimeGrid& grid, int knot_a, int knot_b) {
  if (knot_a > knot_b) throw SolverError(ErrorKind::BadInterval, "kernel interval reversed");
  if (knot_a < 0 || knot_b > grid.steps) throw SolverError(ErrorKind::BadInterval, "kernel knots outside grid");
  const size_t m = static_cast<size_t>(grid.steps);
  const size_t comps = beta.size() / m;
  double acc = 0.0;
  for (size_t d = 0; d < comps; ++d) {
    const double* b = beta.data() + d * m;
    const double* w = increments.data() + d * m;
    for (int j = knot_a; j < knot_b; ++j) {
      acc += b[j] * w[j] - 0.5 * b[j] * b[j] * grid.dt;
    }
  }
  return acc;
}

double kernel_F(std::span<const double> beta, std::span<const double> increments,
                const TimeGrid& grid, int knot_a, int knot_b) {
  return std::exp(log_kernel_factor(beta, increments, grid, knot_a, knot_b));
}

double kernel_Phi(double lambda, std::span<const double> beta, std::span<const double> increments,
                  const TimeGrid& grid, int knot_a, int knot_b) {
  double log_f = log_kernel_factor(beta, increments, grid, knot_a, knot_b);
  return std::exp(log_f - lambda * grid.dt * static_cast<double>(knot_b - knot_a));
}

double kernel_cF(std::span<const double> beta, const TimeGrid& grid) {
  const size_t m = static_cast<size_t>(grid.steps);
  const size_t comps = beta.size() / m;
  double acc = 0.0;
  for (size_t d = 0; d < comps; ++d)
    for (size_t j = 0; j < m; ++j) acc += beta[d * m + j] * beta[d * m + j] * grid.dt;
  return std::exp(acc);
}

}  // namespace nlspde
