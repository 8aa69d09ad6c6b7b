// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace c4d {

/// Base of every error raised by the library. The CLI maps the concrete
/// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent configuration (unknown key, bad value, violated
/// config invariant, misuse of a training contract).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data problems: shape mismatches, unreadable files, bad containers.
class DataError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public DataError {
 public:
  using DataError::DataError;
};

/// A NaN or Inf was produced somewhere it must not be.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// An external scorer did not honour its one-line protocol.
class ScorerError : public Error {
 public:
  using Error::Error;
};

}  // namespace c4d
