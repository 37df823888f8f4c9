#pragma once

#include <stdexcept>
#include <string>

namespace smartpc {

/// Precondition or argument-shape violation.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Caller broke an API contract, e.g. requested gradients through a
/// gradient-free BatchNorm pass.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Structurally invalid binary or manifest file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed text input; the message carries the path and line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& path, std::size_t line, const std::string& what)
      : std::runtime_error(path + ":" + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, std::size_t step, const std::string& what)
      : std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + ": " + what),
        epoch_(epoch),
        step_(step) {}

  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t epoch_;
  std::size_t step_;
};

}  // namespace smartpc
