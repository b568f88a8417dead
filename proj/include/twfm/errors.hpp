#pragma once

#include <stdexcept>
#include <string>

namespace twfm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or dimensions that do not agree with each other.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Parameters that break a model or identification condition where the
/// operation requires them to hold.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A loading column that is identically zero.
class DegenerateLoadingError : public Error {
 public:
  using Error::Error;
};

/// A dense oracle was asked for a matrix larger than the configured cap.
class CapExceededError : public Error {
 public:
  using Error::Error;
};

/// Factorisation failure or non-finite arithmetic.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Malformed input files (CSV, JSON).
class InputError : public Error {
 public:
  using Error::Error;
};

}  // namespace twfm
