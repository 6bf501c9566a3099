#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "randprune/data.hpp"
#include "randprune/mask.hpp"
#include "randprune/nn.hpp"
#include "randprune/rng.hpp"
#include "randprune/schedule.hpp"

namespace randprune {

enum class MaskOrigin { deterministic, sampled };

inline const char* to_string(MaskOrigin o) { return o == MaskOrigin::deterministic ? "deterministic" : "sampled"; }

/// Mean of per-layer ir values; infinite if any layer is.
inline double mean_ir(std::span<const double> per_layer) {
  if (per_layer.empty()) return 0.0;
  double s = 0.0;
  for (double v : per_layer) s += v;
  return s / static_cast<double>(per_layer.size());
}

struct CandidateMask {
  std::size_t id = 0;
  std::vector<BitMask> masks;
  MaskOrigin origin = MaskOrigin::deterministic;
  std::vector<double> ir_per_layer;
  std::optional<double> emep_score;
  std::optional<double> emep_loss;

  double ir_mean() const { return mean_ir(ir_per_layer); }
};

struct PruneRunConfig {
  std::vector<std::size_t> widths;  // input, hidden..., output
  Activation hidden_activation = Activation::relu;
  SparsitySchedule schedule;
  std::size_t n_candidates = 8;
  SamplingConfig sampling;
  double emep_lr_multiplier = 5.0;
  double base_lr = 0.01;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::size_t batch_size = 32;
  std::size_t dense_epochs_max = 100;
  std::size_t finetune_epochs_max = 30;
  std::size_t convergence_patience = 5;
  KdConfig kd;
  std::uint64_t seed = 0;
  std::size_t parallel = 1;  // worker threads for candidate evaluation

  void validate() const {
    if (widths.size() < 2) throw Error("network needs at least input and output widths");
    if (schedule.size() == 0) throw Error("sparsity schedule is empty");
    if (n_candidates < 1) throw Error("n_candidates must be >= 1");
    sampling.validate();
    if (!(emep_lr_multiplier > 1.0)) throw Error("emep_lr_multiplier must be > 1");
    if (!(base_lr > 0.0)) throw Error("base_lr must be > 0");
    if (batch_size == 0) throw Error("batch_size must be >= 1");
    if (convergence_patience == 0) throw Error("convergence_patience must be >= 1");
    kd.validate();
  }
};

struct CandidateSummary {
  std::size_t id = 0;
  MaskOrigin origin = MaskOrigin::deterministic;
  double ir_mean = 0.0;
  std::optional<double> emep_score;
  std::optional<double> emep_loss;
};

struct StageReport {
  std::size_t stage = 0;
  double sparsity = 0.0;
  std::vector<CandidateSummary> candidates;
  std::size_t winner_id = 0;
  MaskOrigin winner_origin = MaskOrigin::deterministic;
  double winner_ir_mean = 0.0;
  double val_accuracy = 0.0;
  double val_loss = 0.0;
  std::size_t finetune_epochs = 0;
  std::vector<std::size_t> zero_counts;  // per layer, after finetuning
  double wall_ms = 0.0;
};

struct RunResult {
  MaskedNetwork network;
  Evaluation dense;
  std::size_t dense_epochs = 0;
  std::vector<StageReport> stages;
};

/// Raised when a stage fails; carries the reports of the stages that completed.
struct RunAborted : Error {
  RunAborted(const std::string& what, std::vector<StageReport> partial) : Error(what), partial(std::move(partial)) {}
  std::vector<StageReport> partial;
};

/// Observation points inside a run. candidate_done may be invoked from worker
/// threads when cfg.parallel > 1.
struct RunHooks {
  std::function<void(std::size_t stage, const ModelSnapshot&)> stage_start;
  std::function<void(std::size_t stage, std::size_t candidate, const MaskedNetwork&, const OptimizerState&,
                     const ModelSnapshot&)>
      candidate_done;
  std::function<void(std::size_t stage, const MaskedNetwork&, const OptimizerState&, const ModelSnapshot&)>
      selection_done;
  std::function<void(const StageReport&, const MaskedNetwork&)> stage_end;
};

/// Candidate 0 is per-layer magnitude top-k; candidates 1..n−1 are ensemble
/// masks whose generator streams are keyed by (seed, stage, candidate, layer).
inline std::vector<CandidateMask> generate_candidates(const MaskedNetwork& net, const StageContext& ctx,
                                                      const PruneRunConfig& cfg) {
  if (ctx.layers.size() != net.layer_count()) throw ShapeError("stage context does not match the network");
  std::vector<CandidateMask> pool(cfg.n_candidates);
  for (std::size_t l = 0; l < net.layer_count(); ++l)
    if (ctx.layers[l].total != net.layer(l).weight_count())
      throw ShapeError("stage context layer " + std::to_string(l) + " size mismatch");

  auto& det = pool[0];
  det.id = 0;
  det.origin = MaskOrigin::deterministic;
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    det.masks.push_back(deterministic_topk_mask(net.layer(l).flat_weights(), ctx.layers[l].retained));
    det.ir_per_layer.push_back(0.0);
  }

  for (std::size_t c = 1; c < pool.size(); ++c) {
    auto& cand = pool[c];
    cand.id = c;
    cand.origin = MaskOrigin::sampled;
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
      const auto& b = ctx.layers[l];
      auto rng = make_rng(cfg.seed, {stream::candidates, ctx.stage, c, l});
      auto ens = build_ensemble_mask(net.layer(l).flat_weights(), b.retained, b.masks, cfg.sampling, rng);
      cand.ir_per_layer.push_back(introduced_randomness(det.masks[l], ens.mask));
      cand.masks.push_back(std::move(ens.mask));
    }
  }
  return pool;
}

namespace detail {

struct TrainOutcome {
  std::size_t epochs = 0;
  Evaluation eval;
};

/// Trains until validation loss has not improved for `patience` consecutive
/// epochs or `max_epochs` is reached. Epoch e shuffles with stream (seed, keys.., e).
inline TrainOutcome train_to_convergence(MaskedNetwork& net, OptimizerState& opt, const Dataset& train,
                                         const Dataset& val, const PruneRunConfig& cfg, const KdConfig& kd,
                                         const Network* teacher, std::size_t max_epochs, std::uint64_t phase, std::uint64_t stage) {
  TrainOutcome out;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stall = 0;
  out.eval = evaluate(net, val);
  for (std::size_t e = 0; e < max_epochs; ++e) {
    auto rng = make_rng(cfg.seed, {phase, stage, e});
    train_one_epoch(net, train, opt, kd, teacher, rng, cfg.batch_size);
    out.epochs = e + 1;
    out.eval = evaluate(net, val);
    if (out.eval.loss < best) {
      best = out.eval.loss;
      stall = 0;
    } else if (++stall >= cfg.convergence_patience) {
      break;
    }
  }
  return out;
}

struct DenseStart {
  MaskedNetwork net;
  OptimizerState opt;
  Evaluation eval;
  std::size_t epochs = 0;
};

inline DenseStart train_dense(const PruneRunConfig& cfg, const Dataset& train, const Dataset& val) {
  if (cfg.widths.front() != train.feature_count())
    throw ShapeError("network input width " + std::to_string(cfg.widths.front()) + " != feature count " +
                     std::to_string(train.feature_count()));
  if (static_cast<int>(cfg.widths.back()) < train.class_count)
    throw ShapeError("network output width is smaller than the class count");
  auto init_rng = make_rng(cfg.seed, {stream::init});
  DenseStart d{MaskedNetwork(Network::initialize(cfg.widths, cfg.hidden_activation, init_rng)), {}, {}, 0};
  d.opt = OptimizerState::for_network(d.net.network(), cfg.optimizer, cfg.base_lr);
  const auto outcome =
      train_to_convergence(d.net, d.opt, train, val, cfg, KdConfig{}, nullptr, cfg.dense_epochs_max, stream::dense, 0);
  d.eval = outcome.eval;
  d.epochs = outcome.epochs;
  return d;
}

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

struct EmepResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

/// Early mask evaluation: apply the candidate, train one epoch at
/// base_lr × emep_lr_multiplier, score on validation, then rewind net and
/// optimizer to the state they had on entry.
inline EmepResult emep_score(MaskedNetwork& net, OptimizerState& opt, const CandidateMask& candidate,
                             const Dataset& train, const Dataset& val, const PruneRunConfig& cfg,
                             std::uint64_t shuffle_seed, const Network* teacher = nullptr) {
  const auto start = snapshot(net, opt);
  EmepResult r;
  try {
    net.set_masks(candidate.masks);
    opt.learning_rate = cfg.base_lr * cfg.emep_lr_multiplier;
    Rng rng(shuffle_seed);
    train_one_epoch(net, train, opt, cfg.kd, teacher, rng, cfg.batch_size);
    const auto e = evaluate(net, val);
    r = {e.accuracy, e.loss};
  } catch (...) {
    restore(net, opt, start);
    throw;
  }
  restore(net, opt, start);
  return r;
}

/// Best EMEP accuracy; ties go to lower validation loss, then lower id.
/// Returns the position of the winner within `pool`.
inline std::size_t mcss_select(std::span<const CandidateMask> pool) {
  if (pool.empty()) throw Error("cannot select from an empty candidate pool");
  for (const auto& c : pool)
    if (!c.emep_score) throw Error("candidate " + std::to_string(c.id) + " has not been scored");
  std::size_t best = 0;
  for (std::size_t i = 1; i < pool.size(); ++i) {
    const auto& a = pool[i];
    const auto& b = pool[best];
    const double la = a.emep_loss.value_or(0.0);
    const double lb = b.emep_loss.value_or(0.0);
    if (*a.emep_score > *b.emep_score ||
        (*a.emep_score == *b.emep_score && (la < lb || (la == lb && a.id < b.id))))
      best = i;
  }
  return best;
}

namespace detail {

inline void score_candidates(std::vector<CandidateMask>& pool, MaskedNetwork& net, OptimizerState& opt,
                             const ModelSnapshot& snap, const Dataset& train, const Dataset& val,
                             const PruneRunConfig& cfg, const Network* teacher, const RunHooks& hooks,
                             std::size_t stage) {
  // Every candidate trains on the same batch order.
  const auto shuffle_seed = derive_seed(cfg.seed, {stream::emep, stage});
  auto score_one = [&](MaskedNetwork& n, OptimizerState& o, std::size_t i) {
    const auto r = emep_score(n, o, pool[i], train, val, cfg, shuffle_seed, teacher);
    pool[i].emep_score = r.accuracy;
    pool[i].emep_loss = r.loss;
    if (hooks.candidate_done) hooks.candidate_done(stage, pool[i].id, n, o, snap);
  };

  const std::size_t workers = std::min(cfg.parallel, pool.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < pool.size(); ++i) score_one(net, opt, i);
    return;
  }

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(pool.size());
  {
    std::vector<std::jthread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
      threads.emplace_back([&] {
        MaskedNetwork local_net = net;
        OptimizerState local_opt = opt;
        for (std::size_t i = next++; i < pool.size(); i = next++) {
          try {
            score_one(local_net, local_opt, i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Iterative magnitude pruning with randomized candidate masks: dense training,
/// then per scheduled sparsity: snapshot, candidate generation, EMEP scoring,
/// MCSS selection, rewind, winner application and finetuning to convergence.
inline RunResult imp_run(const PruneRunConfig& cfg, const Dataset& train, const Dataset& val,
                         const RunHooks& hooks = {}) {
  cfg.validate();
  train.validate();
  val.validate();
  auto dense = detail::train_dense(cfg, train, val);
  RunResult result{dense.net, dense.eval, dense.epochs, {}};
  MaskedNetwork& net = result.network;
  OptimizerState& opt = dense.opt;
  std::optional<Network> teacher;
  if (cfg.kd.enabled) teacher = net.network();
  const Network* teacher_ptr = teacher ? &*teacher : nullptr;

  for (std::size_t t = 0; t < cfg.schedule.size(); ++t) {
    try {
      const auto t0 = std::chrono::steady_clock::now();
      const auto ctx = make_stage_context(t, cfg.schedule[t], net.network().weight_counts(), cfg.sampling);
      const auto snap = snapshot(net, opt);
      if (hooks.stage_start) hooks.stage_start(t, snap);

      auto pool = generate_candidates(net, ctx, cfg);
      detail::score_candidates(pool, net, opt, snap, train, val, cfg, teacher_ptr, hooks, t);
      const auto winner = mcss_select(pool);
      restore(net, opt, snap);
      if (hooks.selection_done) hooks.selection_done(t, net, opt, snap);

      net.set_masks(pool[winner].masks);
      const auto ft = detail::train_to_convergence(net, opt, train, val, cfg, cfg.kd, teacher_ptr, cfg.finetune_epochs_max,
                                                   stream::finetune, t);

      StageReport rep;
      rep.stage = t;
      rep.sparsity = cfg.schedule[t];
      for (const auto& c : pool) rep.candidates.push_back({c.id, c.origin, c.ir_mean(), c.emep_score, c.emep_loss});
      rep.winner_id = pool[winner].id;
      rep.winner_origin = pool[winner].origin;
      rep.winner_ir_mean = pool[winner].ir_mean();
      rep.val_accuracy = ft.eval.accuracy;
      rep.val_loss = ft.eval.loss;
      rep.finetune_epochs = ft.epochs;
      for (std::size_t l = 0; l < net.layer_count(); ++l) rep.zero_counts.push_back(net.zero_count(l));
      rep.wall_ms = detail::elapsed_ms(t0);
      if (hooks.stage_end) hooks.stage_end(rep, net);
      result.stages.push_back(std::move(rep));
    } catch (const std::exception& e) {
      throw RunAborted("stage " + std::to_string(t) + " failed: " + e.what(), result.stages);
    }
  }
  return result;
}

/// Plain iterative magnitude pruning: per stage, apply the top-k mask and
/// finetune. Shares seeds and training with imp_run but never builds candidates.
inline RunResult magnitude_imp_run(const PruneRunConfig& cfg, const Dataset& train, const Dataset& val,
                                   const RunHooks& hooks = {}) {
  cfg.validate();
  train.validate();
  val.validate();
  auto dense = detail::train_dense(cfg, train, val);
  RunResult result{dense.net, dense.eval, dense.epochs, {}};
  MaskedNetwork& net = result.network;
  OptimizerState& opt = dense.opt;
  std::optional<Network> teacher;
  if (cfg.kd.enabled) teacher = net.network();

  for (std::size_t t = 0; t < cfg.schedule.size(); ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    if (hooks.stage_start) hooks.stage_start(t, snapshot(net, opt));
    const auto counts = net.network().weight_counts();
    std::vector<BitMask> masks;
    for (std::size_t l = 0; l < net.layer_count(); ++l)
      masks.push_back(
          deterministic_topk_mask(net.layer(l).flat_weights(), counts[l] - pruned_count(counts[l], cfg.schedule[t])));
    net.set_masks(std::move(masks));
    const auto ft = detail::train_to_convergence(net, opt, train, val, cfg, cfg.kd, teacher ? &*teacher : nullptr,
                                                 cfg.finetune_epochs_max, stream::finetune, t);
    StageReport rep;
    rep.stage = t;
    rep.sparsity = cfg.schedule[t];
    rep.candidates.push_back({0, MaskOrigin::deterministic, 0.0, std::nullopt, std::nullopt});
    rep.val_accuracy = ft.eval.accuracy;
    rep.val_loss = ft.eval.loss;
    rep.finetune_epochs = ft.epochs;
    for (std::size_t l = 0; l < net.layer_count(); ++l) rep.zero_counts.push_back(net.zero_count(l));
    rep.wall_ms = detail::elapsed_ms(t0);
    if (hooks.stage_end) hooks.stage_end(rep, net);
    result.stages.push_back(std::move(rep));
  }
  return result;
}

}  // namespace randprune
