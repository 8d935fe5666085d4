#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sscan {

// Error hierarchy. Shape/data problems are caller bugs or bad input files;
// ModeError means an operation was invoked in a configuration it does not
// support (e.g. convolution path with selective parameters).
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ModeError : std::runtime_error {
  explicit ModeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

using index_t = std::int64_t;

}  // namespace sscan
