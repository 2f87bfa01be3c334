#pragma once
// Exception hierarchy shared by every module. The CLI maps these onto exit codes:
// ValidationError and subclasses -> 1, IoError and subclasses -> 2.

#include <stdexcept>
#include <string>

namespace vf {

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes; the message names every shape involved.
struct ShapeError : ValidationError {
  using ValidationError::ValidationError;
};

// Invalid model/data/run configuration.
struct ConfigError : ValidationError {
  using ValidationError::ValidationError;
};

// Violated call precondition (e.g. backward on a non-scalar).
struct ContractError : ValidationError {
  using ValidationError::ValidationError;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BadMagicError : IoError {
  using IoError::IoError;
};

struct ChecksumError : IoError {
  using IoError::IoError;
};

struct TruncatedError : IoError {
  using IoError::IoError;
};

// Structurally invalid header (zero dims, unknown dtype, unsupported version).
struct FormatError : IoError {
  using IoError::IoError;
};

}  // namespace vf
