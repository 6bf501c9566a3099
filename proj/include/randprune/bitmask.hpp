#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "randprune/error.hpp"

namespace randprune {

/// Binary retain (1) / prune (0) indicator over a flattened weight vector.
/// The retained count is kept in sync with the bits at all times.
class BitMask {
 public:
  BitMask() = default;
  explicit BitMask(std::size_t size, bool value = false)
      : bits_(size, value ? 1 : 0), retained_(value ? size : 0) {}

  static BitMask from_indices(std::size_t size, std::span<const std::size_t> indices) {
    BitMask m(size);
    for (auto i : indices) {
      if (i >= size) throw ShapeError("mask index out of range");
      m.set(i, true);
    }
    return m;
  }

  static BitMask from_bits(std::span<const std::uint8_t> bits) {
    BitMask m(bits.size());
    for (std::size_t i = 0; i < bits.size(); ++i) m.set(i, bits[i] != 0);
    return m;
  }

  std::size_t size() const { return bits_.size(); }
  std::size_t retained() const { return retained_; }
  std::size_t pruned() const { return bits_.size() - retained_; }

  bool operator[](std::size_t i) const { return bits_[i] != 0; }

  void set(std::size_t i, bool value) {
    const std::uint8_t v = value ? 1 : 0;
    if (bits_[i] == v) return;
    bits_[i] = v;
    if (value)
      ++retained_;
    else
      --retained_;
  }

  std::span<const std::uint8_t> bits() const { return bits_; }

  std::vector<std::size_t> retained_indices() const {
    std::vector<std::size_t> out;
    out.reserve(retained_);
    for (std::size_t i = 0; i < bits_.size(); ++i)
      if (bits_[i]) out.push_back(i);
    return out;
  }

  friend bool operator==(const BitMask& a, const BitMask& b) { return a.bits_ == b.bits_; }

 private:
  std::vector<std::uint8_t> bits_;
  std::size_t retained_ = 0;
};

}  // namespace randprune
