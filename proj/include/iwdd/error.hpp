#pragma once

#include <stdexcept>
#include <string>

namespace iwdd {

// Error categories double as CLI exit codes (see tools/iwdd_cli.cpp).
enum class ErrorKind {
  Data = 1,        // malformed input data or invalid arguments
  Config = 1,
  Training = 2,    // non-finite loss or gradient during optimisation
  Evaluation = 3,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct DataError : Error {
  explicit DataError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

struct TrainingError : Error {
  explicit TrainingError(const std::string& what) : Error(ErrorKind::Training, what) {}
};

struct EvaluationError : Error {
  explicit EvaluationError(const std::string& what) : Error(ErrorKind::Evaluation, what) {}
};

}  // namespace iwdd
