#pragma once

#include <stdexcept>
#include <string>

namespace hdbf {

/// Incompatible tensor extents.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid model, encoder, MIIM or training configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// API misuse: non-scalar loss, missing pyramid stage, step past schedule end.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed input data (out-of-range labels, truncated checkpoints).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values detected during a checked forward pass.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hdbf
