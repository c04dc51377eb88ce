#pragma once

#include <stdexcept>
#include <string>

namespace refgame {

/// Shapes of operands do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration or hyperparameter value is outside its valid domain.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// An object was used in a state that does not permit the operation
/// (consumed tape, missing gradient, empty pool).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// The caller violated a function contract (e.g. non-scalar objective).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A rank correlation was requested on data with zero variance.
/// Kept distinct from a correlation of zero.
class UndefinedCorrelationError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class UndefinedStabilityError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, long step)
      : std::runtime_error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace refgame
