#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lora {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A numeric routine failed (non-convergence, NaN, ...).
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::size_t iterations = 0)
      : Error(what), iterations_(iterations) {}
  std::size_t iterations() const { return iterations_; }

 private:
  std::size_t iterations_;
};

/// A caller violated an API state contract (double merge, non-scalar loss, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration, strategy, or file contents.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training diverged.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t step) : Error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// The benchmark cannot produce a meaningful measurement.
class BenchmarkError : public Error {
 public:
  using Error::Error;
};

}  // namespace lora
