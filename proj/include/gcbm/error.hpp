#pragma once

#include <stdexcept>
#include <string>

namespace gcbm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A NaN/Inf appeared, or an operation is undefined at its input (zero-norm
// rows for cosine similarity, single-class AUC, ...).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed on-disk data: bad magic, truncated payload, meta mismatch.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or request arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace gcbm
