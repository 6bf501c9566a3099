#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "randprune/bitmask.hpp"
#include "randprune/error.hpp"
#include "randprune/rng.hpp"

namespace randprune {

struct MaskError : Error {
  using Error::Error;
};

/// How the number of ensembled masks M follows sparsity across stages.
/// decrease: M ∝ pruned count (randomness falls as pruning proceeds).
/// increase: M ∝ kept count.
enum class RandomnessSchedule { decrease, increase };

struct SamplingConfig {
  double sampling_ratio = 5e-5;
  int exponent = 5;                // sharpening power applied to |w|
  double support_multiplier = 2.0; // support = top ⌈r·k⌉ magnitudes
  RandomnessSchedule schedule = RandomnessSchedule::decrease;

  void validate() const {
    if (!(sampling_ratio > 0.0) || !std::isfinite(sampling_ratio)) throw MaskError("sampling ratio must be > 0");
    if (exponent < 1) throw MaskError("sampling exponent must be >= 1");
    if (!(support_multiplier >= 1.0) || !std::isfinite(support_multiplier))
      throw MaskError("support multiplier must be >= 1");
  }
};

/// Normalized sampling distribution over weight indices. Entries outside the
/// support are exactly zero.
class ProbVector {
 public:
  ProbVector() = default;

  /// Normalizes non-negative weights into a distribution.
  static ProbVector from_weights(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw MaskError("sampling weights must be finite and >= 0");
      total += w;
    }
    if (!(total > 0.0)) throw MaskError("sampling weights sum to zero");
    ProbVector p;
    p.probs_.reserve(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) {
      p.probs_.push_back(weights[i] / total);
      if (weights[i] > 0.0) p.support_.push_back(i);
    }
    return p;
  }

  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::span<const double> probs() const { return probs_; }
  std::span<const std::size_t> support() const { return support_; }

 private:
  std::vector<double> probs_;
  std::vector<std::size_t> support_;
};

namespace detail {

/// Indices ordered by descending |w|, ties by ascending index.
inline std::vector<std::size_t> magnitude_order(std::span<const double> w) {
  std::vector<std::size_t> idx(w.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(w[a]) > std::abs(w[b]); });
  return idx;
}

inline std::size_t ceil_count(double x) {
  const double r = std::round(x);
  if (std::abs(x - r) <= 1e-9 * std::max(1.0, std::abs(x))) return static_cast<std::size_t>(r);
  return static_cast<std::size_t>(std::ceil(x));
}

}  // namespace detail

/// p ∝ |w|^T over the ⌈r·k⌉ largest-magnitude nonzero weights, zero elsewhere.
inline ProbVector derive_sampling_probs(std::span<const double> w, std::size_t k, const SamplingConfig& cfg) {
  cfg.validate();
  std::size_t nonzero = 0;
  double max_abs = 0.0;
  for (double v : w) {
    if (!std::isfinite(v)) throw MaskError("weights must be finite");
    if (v != 0.0) ++nonzero;
    max_abs = std::max(max_abs, std::abs(v));
  }
  if (k == 0) throw MaskError("cannot sample a mask retaining zero weights");
  if (nonzero < k)
    throw MaskError("only " + std::to_string(nonzero) + " nonzero weights, cannot retain " + std::to_string(k));

  const std::size_t width = std::min(nonzero, detail::ceil_count(cfg.support_multiplier * static_cast<double>(k)));
  const auto order = detail::magnitude_order(w);
  std::vector<double> raw(w.size(), 0.0);
  for (std::size_t j = 0; j < width; ++j) {
    const auto i = order[j];
    // Scaling by the max magnitude keeps |w|^T away from underflow.
    raw[i] = std::pow(std::abs(w[i]) / max_abs, cfg.exponent);
    if (raw[i] == 0.0) raw[i] = std::numeric_limits<double>::denorm_min();
  }
  return ProbVector::from_weights(raw);
}

/// k distinct indices drawn as sequential weighted draws without replacement.
/// Uses one exponential key log(u)/p per support index and keeps the k largest,
/// which has the same law as renormalizing after every draw. Returns indices in
/// ascending order.
inline std::vector<std::size_t> sample_without_replacement(const ProbVector& p, std::size_t k, Rng& rng) {
  const auto support = p.support();
  if (support.size() < k)
    throw MaskError("support of size " + std::to_string(support.size()) + " cannot yield " + std::to_string(k) +
                    " distinct indices");
  struct Keyed {
    double key;
    std::size_t index;
  };
  std::vector<Keyed> keys;
  keys.reserve(support.size());
  for (auto i : support) keys.push_back({std::log(uniform_open01(rng)) / p[i], i});
  const auto by_key = [](const Keyed& a, const Keyed& b) {
    return a.key > b.key || (a.key == b.key && a.index < b.index);
  };
  std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(k), keys.end(), by_key);
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t j = 0; j < k; ++j) out.push_back(keys[j].index);
  std::sort(out.begin(), out.end());
  return out;
}

struct EnsembleCount {
  std::vector<std::uint32_t> counts;
  std::size_t masks_added = 0;
};

struct EnsembleMask {
  BitMask mask;
  EnsembleCount counts;
};

/// Sums M sampled masks and keeps the k most frequently drawn indices
/// (ties: larger |w|, then lower index).
inline EnsembleMask build_ensemble_mask(std::span<const double> w, std::size_t k, std::size_t mask_count,
                                       const SamplingConfig& cfg, Rng& rng) {
  if (mask_count == 0) throw MaskError("ensemble needs at least one sampled mask");
  const auto p = derive_sampling_probs(w, k, cfg);

  EnsembleMask out;
  out.counts.counts.assign(w.size(), 0);
  for (std::size_t m = 0; m < mask_count; ++m) {
    for (auto i : sample_without_replacement(p, k, rng)) ++out.counts.counts[i];
    ++out.counts.masks_added;
  }

  const auto& counts = out.counts.counts;
  std::vector<std::size_t> idx(w.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (counts[a] != counts[b]) return counts[a] > counts[b];
                      if (std::abs(w[a]) != std::abs(w[b])) return std::abs(w[a]) > std::abs(w[b]);
                      return a < b;
                    });
  out.mask = BitMask::from_indices(w.size(), std::span(idx).first(k));
  return out;
}

/// Magnitude pruning: retain exactly the k largest |w| (ties to lower index).
inline BitMask deterministic_topk_mask(std::span<const double> w, std::size_t k) {
  if (k > w.size())
    throw MaskError("cannot retain " + std::to_string(k) + " of " + std::to_string(w.size()) + " weights");
  const auto order = detail::magnitude_order(w);
  return BitMask::from_indices(w.size(), std::span(order).first(k));
}

/// k-th largest magnitude, the boundary below which magnitude pruning removes weights.
inline double pruning_boundary(std::span<const double> w, std::size_t k) {
  if (k == 0 || k > w.size()) throw MaskError("pruning boundary needs 1 <= k <= size");
  std::vector<double> mags(w.size());
  std::transform(w.begin(), w.end(), mags.begin(), [](double v) { return std::abs(v); });
  std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(k - 1), mags.end(), std::greater<>());
  return mags[k - 1];
}

/// ir = (C − k − C_s) / C_s with C_s the count pruned by both masks. Returns
/// +infinity when the pruned sets are disjoint (C_s = 0).
inline double introduced_randomness(const BitMask& deterministic, const BitMask& sampled) {
  if (deterministic.size() != sampled.size()) throw MaskError("masks differ in length");
  if (deterministic.retained() != sampled.retained()) throw MaskError("masks differ in retained count");
  const std::size_t pruned = deterministic.pruned();
  if (pruned == 0) throw MaskError("introduced randomness needs at least one pruned weight");
  std::size_t common = 0;
  const auto a = deterministic.bits();
  const auto b = sampled.bits();
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!a[i] && !b[i]) ++common;
  if (common == 0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(pruned - common) / static_cast<double>(common);
}

}  // namespace randprune
