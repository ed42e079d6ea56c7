#pragma once

#include <stdexcept>
#include <string>

namespace bgvc {

/// Base of every error the library throws. The CLI maps the concrete
/// subclass onto its exit code.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration, flags, or architecture mismatch.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Bad or missing input data: audio, manifests, references.
class DataError : public Error {
public:
  using Error::Error;
};

/// Corrupt or version-mismatched file on disk.
class FormatError : public DataError {
public:
  using DataError::DataError;
};

/// Shape or frame-parameter mismatch between operands.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// A loss or gradient went non-finite during training.
class NumericError : public Error {
public:
  NumericError(const std::string& term, const std::string& what)
      : Error(what), term_(term) {}
  const std::string& term() const noexcept { return term_; }

private:
  std::string term_;
};

} // namespace bgvc
