#pragma once

#include <stdexcept>
#include <string>

namespace ks {

/// Base of every error raised by the library. `exit_code()` is what the CLI
/// returns when the error escapes a subcommand.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const { return 4; }
};

class FormatError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 2; }
};

class LabelError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 3; }
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class TapeError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class KeyError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class EmptySelection : public Error {
 public:
  using Error::Error;
};

/// Failure inside a named experiment stage; keeps the original exit code.
class StageError : public Error {
 public:
  StageError(const std::string& stage, const std::string& what, int code)
      : Error("stage " + stage + ": " + what), stage_(stage), code_(code) {}
  int exit_code() const override { return code_; }
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
  int code_;
};

}  // namespace ks
