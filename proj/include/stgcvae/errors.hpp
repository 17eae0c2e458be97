#pragma once

#include <stdexcept>
#include <string>

namespace stgcvae {

/// Tensor shapes that do not agree for the requested operation.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Out-of-range scalar argument (dropout rate, epoch, k, ...).
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Violated calling contract, e.g. backward() on a non-scalar.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Malformed text input. Carries the offending line number (1-based, 0 if n/a).
struct ParseError : std::runtime_error {
  ParseError(const std::string& what, std::size_t line_no)
      : std::runtime_error(what), line(line_no) {}
  std::size_t line;
};

/// Semantically inconsistent data, e.g. duplicate (frame, agent) pairs.
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Corrupt or unsupported binary file.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value or unknown key.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// File that cannot be opened, read or written.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace stgcvae
