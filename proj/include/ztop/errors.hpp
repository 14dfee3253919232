#pragma once

#include <stdexcept>
#include <string>

namespace ztop {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape / dimension mismatches.
struct ShapeError : Error {
  using Error::Error;
};

// No feasible action (e.g. all-false softmax mask).
struct InfeasibleError : Error {
  using Error::Error;
};

// Exact oracle asked for an instance beyond its size cap.
struct SizeLimitError : Error {
  using Error::Error;
};

// Bad argument outside the shape/size categories above.
struct InvalidArgumentError : Error {
  using Error::Error;
};

struct UnsupportedProblemError : InvalidArgumentError {
  using InvalidArgumentError::InvalidArgumentError;
};

struct InsufficientModelsError : InvalidArgumentError {
  using InvalidArgumentError::InvalidArgumentError;
};

struct BudgetExceededError : InvalidArgumentError {
  using InvalidArgumentError::InvalidArgumentError;
};

// Non-finite values or domain violations in numeric kernels.
struct NumericError : Error {
  using Error::Error;
};

// Experiment configuration problems (unknown key, bad value, ...).
struct ConfigError : Error {
  using Error::Error;
};

// Dataset files or instances that fail validation.
struct DataError : Error {
  using Error::Error;
};

// Training aborted (e.g. divergence).
struct TrainingError : Error {
  using Error::Error;
};

// Filesystem and serialization failures.
struct IoError : Error {
  using Error::Error;
};

struct FormatError : IoError {
  using IoError::IoError;
};

struct CorruptionError : IoError {
  using IoError::IoError;
};

}  // namespace ztop
