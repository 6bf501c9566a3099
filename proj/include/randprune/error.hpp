#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace randprune {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Incompatible matrix, mask or snapshot dimensions.
struct ShapeError : Error {
  using Error::Error;
};

/// Cached forward pass computed on parameters that have since changed.
struct StaleCacheError : Error {
  using Error::Error;
};

struct NonFiniteGradientError : Error {
  NonFiniteGradientError(std::size_t layer)
      : Error("non-finite gradient in layer " + std::to_string(layer)), layer(layer) {}
  std::size_t layer;
};

}  // namespace randprune
