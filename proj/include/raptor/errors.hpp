#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace raptor {

// Contract violation by the caller: bad shapes, out-of-range values, unknown ids.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A computation produced a NaN/Inf. The message names where it happened.
class NumericFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed on-disk artifact (feature file, WAV, checkpoint, JSON line).
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what, std::uint64_t offset = 0)
      : std::runtime_error(what), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace raptor
