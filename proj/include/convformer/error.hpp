#pragma once

#include <stdexcept>
#include <string>

namespace convformer {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not agree with an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Spatial sizes that cannot be produced (non-positive outputs, indivisible
// inputs, odd sizes before a stride-2 layer).
class GeometryError : public Error {
 public:
  using Error::Error;
};

// Element counts that overflow the index range.
class SizeError : public Error {
 public:
  using Error::Error;
};

// Invalid model or block configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed autodiff graph (dangling node ids).
class GraphError : public Error {
 public:
  using Error::Error;
};

// Violated call contract (non-scalar backward root, label out of range).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Training diverged.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// Checkpoint or config file problems.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace convformer
