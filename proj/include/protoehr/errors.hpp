#pragma once

#include <stdexcept>
#include <string>

namespace protoehr {

/// Shape or dimension violation in tensor operations.
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

/// Violated precondition of a documented operation contract.
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid or infeasible configuration.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed input file. Carries a 1-based line number when known.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, long line = -1)
      : std::runtime_error(line >= 0 ? what + " (line " + std::to_string(line) + ")" : what),
        line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

/// Metric undefined for the given inputs (e.g. single-class labels).
class MetricError : public std::runtime_error {
 public:
  explicit MetricError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace protoehr
