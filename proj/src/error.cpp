#include "f3r/error.hpp"

namespace f3r {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NonPositiveDepth: return "NonPositiveDepth";
    case ErrorKind::EmptyView: return "EmptyView";
    case ErrorKind::Io: return "IoError";
    case ErrorKind::Format: return "FormatError";
    case ErrorKind::Shape: return "ShapeError";
    case ErrorKind::PoolTooSmall: return "PoolTooSmall";
    case ErrorKind::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorKind::StaleTape: return "StaleTape";
    case ErrorKind::ConfigMismatch: return "ConfigMismatch";
    case ErrorKind::EmptyMask: return "EmptyMask";
    case ErrorKind::DegenerateScale: return "DegenerateScale";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::Diverged: return "DivergedError";
    case ErrorKind::TooFewPoints: return "TooFewPoints";
    case ErrorKind::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorKind::NoConsensus: return "NoConsensus";
    case ErrorKind::TooFewViews: return "TooFewViews";
    case ErrorKind::EmptyCloud: return "EmptyCloud";
    case ErrorKind::NonPositiveGtDepth: return "NonPositiveGtDepth";
    case ErrorKind::Config: return "ConfigError";
    case ErrorKind::Schema: return "SchemaError";
    case ErrorKind::OutOfMemory: return "OutOfMemory";
  }
  return "UnknownError";
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Diverged:
    case ErrorKind::NonFiniteActivation:
    case ErrorKind::NonFiniteGradient:
      return 3;
    case ErrorKind::Io:
    case ErrorKind::Format:
      return 4;
    default:
      return 2;
  }
}

}  // namespace f3r
