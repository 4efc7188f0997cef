#include "nlspde/errors.hpp"

namespace nlspde {

const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::BadGrid: return "BadGrid";
    case ErrorKind::NonPositiveDiffusion: return "NonPositiveDiffusion";
    case ErrorKind::EigensolveFailure: return "EigensolveFailure";
    case ErrorKind::NonPositiveSpectrum: return "NonPositiveSpectrum";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::BadTime: return "BadTime";
    case ErrorKind::BadInterval: return "BadInterval";
    case ErrorKind::DegenerateMultiplier: return "DegenerateMultiplier";
    case ErrorKind::GridMisaligned: return "GridMisaligned";
    case ErrorKind::IllPosedWeight: return "IllPosedWeight";
    case ErrorKind::UnstableStep: return "UnstableStep";
    case ErrorKind::UnsupportedNoise: return "UnsupportedNoise";
    case ErrorKind::SupportViolation: return "SupportViolation";
    case ErrorKind::ThetaViolation: return "ThetaViolation";
    case ErrorKind::BadConfig: return "BadConfig";
  }
  return "Unknown";
}

}  // namespace nlspde
