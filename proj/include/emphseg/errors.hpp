#pragma once

#include <stdexcept>
#include <string>

namespace emphseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Header dimensions disagree with payload or with each other.
class DimensionError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// File ended before the declared payload was read.
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Input is well-formed but the requested quantity is undefined (e.g. empty lung).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration, missing prior, mismatched bin edges and the like.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Caller violated an operation precondition (shape mismatch, missing input).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Phantom generation could not meet its target.
class GenerationError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss or gradient.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure (open, write, rename).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace emphseg
