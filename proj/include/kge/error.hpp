#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace kge {

// Base for every error raised by the library. The CLI maps subclasses onto
// process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : Error(file + ":" + std::to_string(line) + ": " + what), file_(file), line_(line) {}

  const std::string& file() const { return file_; }
  std::size_t line() const { return line_; }

 private:
  std::string file_;
  std::size_t line_;
};

class BoundsError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class SingularityError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t epoch, std::size_t batch, const std::string& what)
      : Error(what), epoch_(epoch), batch_(batch) {}

  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

// A configuration with one or more invalid fields; problems() lists each.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : Error(join(problems)), problems_(std::move(problems)) {}

  const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out = "invalid config:";
    for (const auto& p : v) out += "\n  " + p;
    return out;
  }

  std::vector<std::string> problems_;
};

// Checkpoint failures.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

class TruncatedCheckpoint : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class BadMagic : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class VersionMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class ChecksumMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class DigestMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace kge
