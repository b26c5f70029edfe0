#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace grond {

/// Root of every error thrown by the library. `exit_code()` is the process
/// status the CLI reports for it.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class ArgumentError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Dataset files missing, truncated or inconsistent.
class IngestionError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

/// Clean-label poisoning asked for more target-class samples than exist.
class CapacityError : public Error {
 public:
  CapacityError(std::size_t needed, std::size_t available)
      : Error("poisoning capacity exceeded: need " + std::to_string(needed) +
              " target-class samples, " + std::to_string(available) + " available"),
        needed_(needed),
        available_(available) {}
  int exit_code() const noexcept override { return 3; }
  std::size_t needed() const noexcept { return needed_; }
  std::size_t available() const noexcept { return available_; }

 private:
  std::size_t needed_;
  std::size_t available_;
};

class DivergenceError : public Error {
 public:
  explicit DivergenceError(int epoch)
      : Error("training diverged (non-finite loss) in epoch " + std::to_string(epoch)),
        epoch_(epoch) {}
  int exit_code() const noexcept override { return 4; }
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

class OptimizationError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

/// Malformed snapshot / trigger files. `offset()` is the byte offset (within
/// the named file) where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  int exit_code() const noexcept override { return 5; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 5; }
};

}  // namespace grond
