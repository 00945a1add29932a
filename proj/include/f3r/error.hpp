#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace f3r {

enum class ErrorKind {
  NonPositiveDepth,
  EmptyView,
  Io,
  Format,
  Shape,
  PoolTooSmall,
  NonFiniteActivation,
  StaleTape,
  ConfigMismatch,
  EmptyMask,
  DegenerateScale,
  NonFiniteGradient,
  Diverged,
  TooFewPoints,
  DegenerateConfiguration,
  NoConsensus,
  TooFewViews,
  EmptyCloud,
  NonPositiveGtDepth,
  Config,
  Schema,
  OutOfMemory,
};

std::string_view error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Process exit code for a failed command: 2 usage/config, 3 divergence, 4 I/O.
int exit_code_for(ErrorKind kind);

}  // namespace f3r
