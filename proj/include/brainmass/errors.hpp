#pragma once

#include <functional>
#include <stdexcept>
#include <string>

namespace brainmass {

/// Base of every error raised by the library. `exit_code()` follows the CLI
/// taxonomy: 1 validation/parameter, 2 I/O or format, 3 numeric failure.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a documented contract (reused tape, non-deterministic
/// objective handed to the gradient checker, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class IncompatibleError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class CorruptionError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

using WarningHandler = std::function<void(const std::string&)>;

/// Installs a sink for non-fatal warnings and returns the previous one.
/// The default sink writes to stderr.
WarningHandler set_warning_handler(WarningHandler handler);
void warn(const std::string& message);

}  // namespace brainmass
