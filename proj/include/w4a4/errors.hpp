#pragma once

#include <stdexcept>
#include <string>

namespace w4a4 {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Malformed or out-of-range input data (token ids, non-finite values, files).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Invalid quantizer description, e.g. c_lo >= c_hi.
class SpecError : public Error {
 public:
  using Error::Error;
};

/// Invalid learnable parameter state.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration key, value or plan/model combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation's precondition (e.g. wrong granularity).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure: divergence, non-positive-definite matrices.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace w4a4
