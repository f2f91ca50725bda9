#pragma once

#include <stdexcept>
#include <string>

namespace pal {

// Error taxonomy shared by the whole library. The CLI maps these onto its
// stable exit-code contract (0 success, 2 usage, 3 numeric abort,
// 4 verification failure).
class Error : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Caller violated a documented precondition.
class UsageError : public Error {
  using Error::Error;
};

// Bad magic bytes, unsupported version, or malformed layout.
class FormatError : public Error {
  using Error::Error;
};

// File is structurally valid but the payload is truncated or inconsistent.
class CorruptionError : public Error {
  using Error::Error;
};

// Values inside an otherwise well-formed input violate the domain contract.
class DataError : public Error {
  using Error::Error;
};

// Non-finite or degenerate arithmetic detected mid-computation.
class NumericError : public Error {
  using Error::Error;
};

class IoError : public Error {
  using Error::Error;
};

}  // namespace pal
