#pragma once

#include <stdexcept>
#include <string>

namespace nlspde {

// Error kinds surfaced by the library. Validation errors map to CLI exit
// code 2, solver errors to exit code 3.
enum class ErrorKind {
  BadGrid,
  NonPositiveDiffusion,
  EigensolveFailure,
  NonPositiveSpectrum,
  ShapeMismatch,
  BadTime,
  BadInterval,
  DegenerateMultiplier,
  GridMisaligned,
  IllPosedWeight,
  UnstableStep,
  UnsupportedNoise,
  SupportViolation,
  ThetaViolation,
  BadConfig,
};

const char* error_kind_name(ErrorKind k);

class SolverError : public std::runtime_error {
 public:
  SolverError(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + what),
        kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

// Raised by input/precondition checks before any solve starts.
class ValidationError : public SolverError {
 public:
  using SolverError::SolverError;
};

}  // namespace nlspde
