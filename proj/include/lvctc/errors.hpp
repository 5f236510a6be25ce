#pragma once

#include <stdexcept>
#include <string>

namespace lvctc {

// Shape or extent mismatch between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Index outside the valid range of a table or axis.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Precondition of an operation violated by the caller.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Non-finite value produced during training or evaluation.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration; carries the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string &what)
      : std::runtime_error(what), field_(std::move(field)) {}
  const std::string &field() const { return field_; }

 private:
  std::string field_;
};

}  // namespace lvctc
