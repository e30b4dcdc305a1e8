#pragma once

#include <stdexcept>
#include <string>

namespace tumorsynth {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file header or unreadable structured record.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// File payload disagrees with its header (truncated, wrong size).
class CorruptionError : public Error {
 public:
  using Error::Error;
};

/// Caller violated an operation precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Tensor or volume extents are incompatible.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Domain object fails validation (contradictory profile, bad config value).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or impossible arithmetic.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Language-model transport failed; the request may be retried.
class TransportError : public Error {
 public:
  using Error::Error;
  bool retryable() const noexcept { return true; }
};

/// Variant generation could not reach the requested count.
class GenerationExhaustedError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class ConflictError : public Error {
 public:
  using Error::Error;
};

}  // namespace tumorsynth
