#pragma once

#include <stdexcept>
#include <string>

namespace hybridlm {

// Base of every error raised by the library. The CLI maps subclasses onto
// exit codes, so keep the hierarchy flat.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration (sizes, ratios, schedule values).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Caller passed data that violates an operation's precondition.
class InputError : public Error {
 public:
  using Error::Error;
};

// A file could not be parsed. Carries the 1-based line when known.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what, long line = 0)
      : Error(line > 0 ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}

  long line() const noexcept { return line_; }

 private:
  long line_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite gradients or updates.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace hybridlm
