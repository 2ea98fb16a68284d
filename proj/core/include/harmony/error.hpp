#pragma once

#include <stdexcept>
#include <string>

namespace harmony {

// Failure categories; the CLI maps them onto process exit codes.
enum class ErrorKind {
  usage,        // bad arguments or configuration
  data,         // malformed files, shape mismatches, degenerate inputs
  convergence,  // iterative procedure did not reach its target
  capacity,     // request exceeds a hard size limit
  io            // filesystem failure
};

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

struct UsageError : Error {
  explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

struct DataError : Error {
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

// Raised when an input has no spread (constant volume, zero variance).
struct DegenerateInputError : DataError {
  explicit DegenerateInputError(const std::string& what) : DataError(what) {}
};

struct ShapeError : DataError {
  explicit ShapeError(const std::string& what) : DataError(what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

struct CapacityError : Error {
  explicit CapacityError(const std::string& what) : Error(ErrorKind::capacity, what) {}
};

class ConvergenceError : public Error {
public:
  ConvergenceError(const std::string& what, double last_value)
      : Error(ErrorKind::convergence, what), last_value_(last_value) {}

  // Last value reached by the iteration (e.g. achieved edge fraction).
  double last_value() const noexcept { return last_value_; }

private:
  double last_value_;
};

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return 2;
    case ErrorKind::convergence: return 4;
    case ErrorKind::data:
    case ErrorKind::capacity:
    case ErrorKind::io: return 3;
  }
  return 3;
}

}  // namespace harmony
