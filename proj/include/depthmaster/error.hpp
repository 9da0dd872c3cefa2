// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace depthmaster {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or precondition on a user-supplied setting.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor or raster shapes that do not satisfy an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Values outside a function's mathematical domain (e.g. depth <= 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file contents. The message names the file.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A reduction or fit whose input carries no information (constant
/// raster, empty mask, zero-variance prediction).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered where finite values are required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A frozen component changed, or a checkpoint does not match its owner.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

}  // namespace depthmaster
