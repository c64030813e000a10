#pragma once

#include <stdexcept>
#include <string>

namespace echwr {

// Every failure raised by the library derives from Error so callers (the CLI in
// particular) can map domain failures to a single exit path.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InfeasibleTargetError : public Error {
 public:
  using Error::Error;
};

class DegenerateEmbeddingError : public NumericError {
 public:
  using NumericError::NumericError;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

}  // namespace echwr
