#pragma once

#include <stdexcept>
#include <string>

namespace polyv {

// Domain/validation failures map to CLI exit code 1.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& msg) : Error(msg) {}
};

struct ParameterError : Error {
  explicit ParameterError(const std::string& msg) : Error(msg) {}
};

struct GeometryError : Error {
  explicit GeometryError(const std::string& msg) : Error(msg) {}
};

struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(msg) {}
};

struct OracleError : Error {
  explicit OracleError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

struct TrainingError : Error {
  explicit TrainingError(const std::string& msg) : Error(msg) {}
};

// Broken internal invariant; CLI exit code 2.
struct InternalError : std::logic_error {
  explicit InternalError(const std::string& msg) : std::logic_error(msg) {}
};

}  // namespace polyv
