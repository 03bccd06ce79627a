#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace adaptsec {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An index (class id, token id, row) is outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A token sequence exceeds the model context.
class LengthError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent configuration (task, verbalizer, adapter, experiment).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A collection is empty or too small for the requested counts.
class SizeError : public Error {
 public:
  using Error::Error;
};

/// A numeric input lies outside the domain of a formula.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Stored bytes do not match their recorded digest, or a file is malformed.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace adaptsec
