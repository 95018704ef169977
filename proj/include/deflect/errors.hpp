#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace deflect {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke a documented precondition (shapes, evaluation-only paths).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

// Non-finite quantity during optimization. Carries the parameter array name
// (e.g. "layer1.weight") and the training step when known.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::string parameter = {},
                std::int64_t step = -1)
      : Error(what), parameter_(std::move(parameter)), step_(step) {}

  const std::string& parameter() const { return parameter_; }
  std::int64_t step() const { return step_; }

 private:
  std::string parameter_;
  std::int64_t step_;
};

}  // namespace deflect
