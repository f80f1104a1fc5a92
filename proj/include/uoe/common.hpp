#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace uoe {

using Shape = std::vector<std::size_t>;

// Error taxonomy: shape mismatches, invalid configuration, bad indices,
// contract violations (e.g. non-scalar loss), and on-disk format problems.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class BoundsError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  out += "]";
  return out;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

}  // namespace uoe
