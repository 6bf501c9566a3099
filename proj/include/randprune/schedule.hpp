#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "randprune/error.hpp"
#include "randprune/mask.hpp"

namespace randprune {

struct ScheduleError : Error {
  ScheduleError(const std::string& what, std::size_t index) : Error(what), index(index) {}
  std::size_t index;
};

/// ⌈sparsity·C⌉, with products within 1e-9 (relative) of an integer snapped to it.
inline std::size_t pruned_count(std::size_t total, double sparsity) {
  return detail::ceil_count(sparsity * static_cast<double>(total));
}

/// Number of masks to ensemble at a stage: ⌊sr·C_pruned⌋ (decrease) or
/// ⌊sr·C_kept⌋ (increase), never below one.
inline std::size_t masks_count(RandomnessSchedule kind, double sampling_ratio, std::size_t total, double sparsity) {
  if (!(sparsity > 0.0 && sparsity < 1.0)) throw Error("sparsity must lie in (0, 1)");
  if (!(sampling_ratio > 0.0)) throw Error("sampling ratio must be positive");
  if (total < 2) throw Error("layer must hold at least 2 weights");
  const std::size_t pruned = pruned_count(total, sparsity);
  const std::size_t base = kind == RandomnessSchedule::decrease ? pruned : total - pruned;
  const double raw = sampling_ratio * static_cast<double>(base);
  const double snapped = std::round(raw);
  const double floored =
      std::abs(raw - snapped) <= 1e-9 * std::max(1.0, raw) ? snapped : std::floor(raw);
  return std::max<std::size_t>(1, static_cast<std::size_t>(floored));
}

class SparsitySchedule {
 public:
  SparsitySchedule() = default;

  /// Accepts a non-empty, strictly increasing list inside (0, 1).
  static SparsitySchedule validate(std::span<const double> stages) {
    if (stages.empty()) throw ScheduleError("sparsity schedule is empty", 0);
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (!(stages[i] > 0.0 && stages[i] < 1.0))
        throw ScheduleError("stage " + std::to_string(i) + ": sparsity " + std::to_string(stages[i]) +
                                " outside (0, 1)",
                            i);
      if (i > 0 && !(stages[i] > stages[i - 1]))
        throw ScheduleError("stage " + std::to_string(i) + ": sparsity does not increase", i);
    }
    SparsitySchedule s;
    s.stages_.assign(stages.begin(), stages.end());
    return s;
  }

  std::span<const double> stages() const { return stages_; }
  std::size_t size() const { return stages_.size(); }
  double operator[](std::size_t i) const { return stages_[i]; }

 private:
  std::vector<double> stages_;
};

inline SparsitySchedule validate_schedule(std::span<const double> stages) {
  return SparsitySchedule::validate(stages);
}

struct LayerBudget {
  std::size_t total = 0;     // C
  std::size_t zeros = 0;     // x
  std::size_t retained = 0;  // k
  std::size_t masks = 0;     // M
};

struct StageContext {
  std::size_t stage = 0;
  double sparsity = 0.0;
  std::vector<LayerBudget> layers;
};

inline StageContext make_stage_context(std::size_t stage, double sparsity, std::span<const std::size_t> layer_sizes,
                                       const SamplingConfig& sampling) {
  StageContext ctx{stage, sparsity, {}};
  for (std::size_t l = 0; l < layer_sizes.size(); ++l) {
    LayerBudget b;
    b.total = layer_sizes[l];
    b.zeros = pruned_count(b.total, sparsity);
    if (b.zeros >= b.total)
      throw ScheduleError("layer " + std::to_string(l) + " would retain no weights at sparsity " +
                              std::to_string(sparsity),
                          stage);
    b.retained = b.total - b.zeros;
    b.masks = masks_count(sampling.schedule, sampling.sampling_ratio, b.total, sparsity);
    ctx.layers.push_back(b);
  }
  return ctx;
}

}  // namespace randprune
