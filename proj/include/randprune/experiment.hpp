#pragma once

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "randprune/data.hpp"
#include "randprune/driver.hpp"
#include "randprune/mask.hpp"
#include "randprune/schedule.hpp"

namespace randprune {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitInvalid = 2;
inline constexpr const char* kSchemaLine = "# schema=1";

/// One or more field-level problems with an experiment configuration.
struct ConfigError : Error {
  explicit ConfigError(std::vector<std::string> diagnostics)
      : Error(diagnostics.empty() ? "invalid configuration" : diagnostics.front()),
        diagnostics(std::move(diagnostics)) {}
  std::vector<std::string> diagnostics;
};

using KeyValues = std::map<std::string, std::string>;

/// Every recognised key with its default value.
inline const KeyValues& default_config() {
  static const KeyValues defaults = {
      {"dataset.kind", "moons"},
      {"dataset.path", ""},
      {"dataset.label_column", ""},
      {"dataset.n", "2000"},
      {"dataset.noise", "0.2"},
      {"dataset.classes", "2"},
      {"dataset.seed", "0"},
      {"dataset.val_fraction", "0.2"},
      {"network.hidden", "32,32"},
      {"network.activation", "relu"},
      {"prune.method", "randomized"},
      {"prune.schedule", "0.54,0.83,0.91,0.9375"},
      {"prune.n_candidates", "8"},
      {"sampling.sr", "5e-5"},
      {"sampling.exponent", "5"},
      {"sampling.range", "2"},
      {"sampling.schedule", "decrease"},
      {"train.optimizer", "adam"},
      {"train.base_lr", "0.01"},
      {"train.emep_lr_multiplier", "5"},
      {"train.batch_size", "32"},
      {"train.dense_epochs_max", "100"},
      {"train.finetune_epochs_max", "30"},
      {"train.patience", "5"},
      {"kd.enabled", "false"},
      {"kd.alpha_hidden", "1"},
      {"kd.alpha_output", "1"},
      {"run.seeds", "0"},
      {"run.out", "runs/default"},
      {"run.parallel", "1"},
      {"run.dump_weights", "false"},
  };
  return defaults;
}

/// Keys that change how a run executes but not what it computes; left out of
/// the summary's config echo.
inline bool is_execution_key(const std::string& key) { return key == "run.out" || key == "run.parallel"; }

/// Parses `key = value` lines; `#` starts a comment, blank lines are ignored.
inline KeyValues parse_config_text(std::string_view text) {
  KeyValues kv;
  std::vector<std::string> diags;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) {
      diags.push_back("line " + std::to_string(line_no) + ": expected 'key = value'");
      continue;
    }
    const auto key = std::string(detail::trim(body.substr(0, eq)));
    if (key.empty()) {
      diags.push_back("line " + std::to_string(line_no) + ": empty key");
      continue;
    }
    kv[key] = std::string(detail::trim(body.substr(eq + 1)));
  }
  if (!diags.empty()) throw ConfigError(std::move(diags));
  return kv;
}

struct DatasetSpec {
  std::string kind;
  std::string path;
  std::string label_column;
  std::size_t n = 0;
  double noise = 0.0;
  int classes = 2;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;
};

enum class PruneMethod { randomized, magnitude };

struct ExperimentConfig {
  DatasetSpec dataset;
  std::vector<std::size_t> hidden;
  PruneMethod method = PruneMethod::randomized;
  PruneRunConfig prune;  // widths are completed once the data is loaded
  std::vector<std::uint64_t> seeds;
  std::string out_dir;
  bool dump_weights = false;
  KeyValues resolved;
};

namespace detail {

class FieldReader {
 public:
  explicit FieldReader(const KeyValues& kv) : kv_(kv) {}

  const std::string& raw(const std::string& key) const { return kv_.at(key); }

  template <class T>
  T number(const std::string& key) {
    const auto& s = raw(key);
    T v{};
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
      fail(key, "'" + s + "' is not a valid number");
      return T{};
    }
    return v;
  }

  template <class T>
  std::vector<T> list(const std::string& key) {
    std::vector<T> out;
    for (auto cell : split_commas(raw(key))) {
      T v{};
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || res.ec != std::errc{} || res.ptr != cell.data() + cell.size()) {
        fail(key, "'" + std::string(cell) + "' is not a valid list element");
        return {};
      }
      out.push_back(v);
    }
    return out;
  }

  bool flag(const std::string& key) {
    const auto& s = raw(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    fail(key, "'" + s + "' is not a boolean");
    return false;
  }

  std::string choice(const std::string& key, std::initializer_list<const char*> options) {
    const auto& s = raw(key);
    for (const char* o : options)
      if (s == o) return s;
    std::string all;
    for (const char* o : options) all += std::string(all.empty() ? "" : "|") + o;
    fail(key, "'" + s + "' must be one of " + all);
    return *options.begin();
  }

  void fail(const std::string& key, const std::string& msg) { diags_.push_back(key + ": " + msg); }
  std::vector<std::string>& diagnostics() { return diags_; }

 private:
  const KeyValues& kv_;
  std::vector<std::string> diags_;
};

}  // namespace detail

/// Overlays `kv` on the defaults and validates every field.
inline ExperimentConfig build_config(const KeyValues& kv) {
  KeyValues resolved = default_config();
  std::vector<std::string> unknown;
  for (const auto& [k, v] : kv) {
    if (!resolved.contains(k))
      unknown.push_back(k + ": unknown key");
    else
      resolved[k] = v;
  }

  detail::FieldReader f(resolved);
  for (auto& u : unknown) f.diagnostics().push_back(u);

  ExperimentConfig c;
  c.resolved = resolved;
  auto& d = c.dataset;
  d.kind = f.choice("dataset.kind", {"moons", "blobs", "spirals", "csv"});
  d.path = f.raw("dataset.path");
  d.label_column = f.raw("dataset.label_column");
  d.n = f.number<std::size_t>("dataset.n");
  d.noise = f.number<double>("dataset.noise");
  d.classes = f.number<int>("dataset.classes");
  d.seed = f.number<std::uint64_t>("dataset.seed");
  d.val_fraction = f.number<double>("dataset.val_fraction");
  if (d.kind == "csv" && d.path.empty()) f.fail("dataset.path", "required when dataset.kind = csv");
  if (d.kind == "csv" && !d.path.empty() && !fs::exists(d.path)) f.fail("dataset.path", "'" + d.path + "' does not exist");
  if (d.kind != "csv" && d.n < 2) f.fail("dataset.n", "must be >= 2");
  if (!(d.noise >= 0.0)) f.fail("dataset.noise", "must be >= 0");
  if (d.kind == "blobs" && d.classes < 2) f.fail("dataset.classes", "must be >= 2");
  if (!(d.val_fraction > 0.0 && d.val_fraction < 1.0)) f.fail("dataset.val_fraction", "must lie in (0, 1)");

  c.hidden = f.list<std::size_t>("network.hidden");
  if (std::find(c.hidden.begin(), c.hidden.end(), std::size_t{0}) != c.hidden.end())
    f.fail("network.hidden", "widths must be positive");
  auto& p = c.prune;
  p.hidden_activation = f.choice("network.activation", {"relu", "identity"}) == "relu" ? Activation::relu
                                                                                      : Activation::identity;
  c.method = f.choice("prune.method", {"randomized", "magnitude"}) == "randomized" ? PruneMethod::randomized
                                                                                   : PruneMethod::magnitude;
  const auto stages = f.list<double>("prune.schedule");
  try {
    p.schedule = validate_schedule(stages);
  } catch (const ScheduleError& e) {
    f.fail("prune.schedule", e.what());
  }
  p.n_candidates = f.number<std::size_t>("prune.n_candidates");
  if (p.n_candidates < 1) f.fail("prune.n_candidates", "must be >= 1");

  p.sampling.sampling_ratio = f.number<double>("sampling.sr");
  if (!(p.sampling.sampling_ratio > 0.0)) f.fail("sampling.sr", "must be > 0");
  p.sampling.exponent = f.number<int>("sampling.exponent");
  if (p.sampling.exponent < 1) f.fail("sampling.exponent", "must be >= 1");
  p.sampling.support_multiplier = f.number<double>("sampling.range");
  if (!(p.sampling.support_multiplier >= 1.0)) f.fail("sampling.range", "must be >= 1");
  p.sampling.schedule = f.choice("sampling.schedule", {"decrease", "increase"}) == "decrease"
                            ? RandomnessSchedule::decrease
                            : RandomnessSchedule::increase;

  p.optimizer = f.choice("train.optimizer", {"adam", "sgd"}) == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
  p.base_lr = f.number<double>("train.base_lr");
  if (!(p.base_lr > 0.0)) f.fail("train.base_lr", "must be > 0");
  p.emep_lr_multiplier = f.number<double>("train.emep_lr_multiplier");
  if (!(p.emep_lr_multiplier > 1.0)) f.fail("train.emep_lr_multiplier", "must be > 1");
  p.batch_size = f.number<std::size_t>("train.batch_size");
  if (p.batch_size < 1) f.fail("train.batch_size", "must be >= 1");
  p.dense_epochs_max = f.number<std::size_t>("train.dense_epochs_max");
  p.finetune_epochs_max = f.number<std::size_t>("train.finetune_epochs_max");
  p.convergence_patience = f.number<std::size_t>("train.patience");
  if (p.convergence_patience < 1) f.fail("train.patience", "must be >= 1");

  p.kd.enabled = f.flag("kd.enabled");
  p.kd.alpha_hidden = f.number<double>("kd.alpha_hidden");
  p.kd.alpha_output = f.number<double>("kd.alpha_output");
  if (!(p.kd.alpha_hidden >= 0.0)) f.fail("kd.alpha_hidden", "must be >= 0");
  if (!(p.kd.alpha_output >= 0.0)) f.fail("kd.alpha_output", "must be >= 0");

  c.seeds = f.list<std::uint64_t>("run.seeds");
  if (c.seeds.empty()) f.fail("run.seeds", "at least one seed required");
  c.out_dir = f.raw("run.out");
  if (c.out_dir.empty()) f.fail("run.out", "must not be empty");
  p.parallel = f.number<std::size_t>("run.parallel");
  if (p.parallel < 1) f.fail("run.parallel", "must be >= 1");
  c.dump_weights = f.flag("run.dump_weights");

  if (!f.diagnostics().empty()) throw ConfigError(std::move(f.diagnostics()));
  return c;
}

inline Dataset load_dataset(const DatasetSpec& d) {
  if (d.kind == "csv") {
    LabelColumn col;
    std::size_t idx = 0;
    const auto& s = d.label_column;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), idx);
    if (s.empty()) {
      // Default to the last column.
      std::ifstream in(d.path);
      std::string header;
      std::getline(in, header);
      col = detail::split_commas(header).size() - 1;
    } else if (res.ec == std::errc{} && res.ptr == s.data() + s.size()) {
      col = idx;
    } else {
      col = s;
    }
    return load_csv(d.path, col);
  }
  const auto kind = d.kind == "moons" ? SyntheticKind::moons
                    : d.kind == "blobs" ? SyntheticKind::blobs
                                        : SyntheticKind::spirals;
  return generate_synthetic(kind, d.n, d.noise, d.seed, d.classes);
}

inline std::string format_real(double v, int digits = 10) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

namespace detail {

inline nlohmann::json real_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

inline void write_weight_dump(const fs::path& file, std::uint64_t seed, std::size_t stage, double sparsity,
                              const Network& net) {
  std::ofstream out(file);
  if (!out) throw Error("cannot write weight dump '" + file.string() + "'");
  out << kSchemaLine << " seed=" << seed << " stage=" << stage << " sparsity=" << format_real(sparsity, 17) << "\n";
  out << "layer,index,weight\n";
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    const auto w = net.layer(l).flat_weights();
    for (std::size_t i = 0; i < w.size(); ++i) out << l << ',' << i << ',' << format_real(w[i], 17) << '\n';
  }
}

}  // namespace detail

inline fs::path weight_dump_path(const fs::path& run_dir, std::uint64_t seed, std::size_t stage) {
  return run_dir / "weights" / ("seed" + std::to_string(seed) + "_stage" + std::to_string(stage) + ".csv");
}

/// Executes every seed of an experiment and writes stages.csv, candidates.csv
/// and summary.json (plus weight dumps when enabled) into the output directory.
inline int run_experiment(const ExperimentConfig& cfg, std::ostream& log, std::ostream& err) {
  Split split;
  try {
    split = prepare_data(load_dataset(cfg.dataset), cfg.dataset.val_fraction, cfg.dataset.seed);
  } catch (const Error& e) {
    err << "error: dataset: " << e.what() << "\n";
    return kExitInvalid;
  }

  PruneRunConfig prune = cfg.prune;
  prune.widths.clear();
  prune.widths.push_back(split.train.feature_count());
  prune.widths.insert(prune.widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  prune.widths.push_back(static_cast<std::size_t>(split.train.class_count));

  const fs::path out_dir = cfg.out_dir;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (cfg.dump_weights) fs::create_directories(out_dir / "weights", ec);
  std::ofstream stages_csv(out_dir / "stages.csv");
  std::ofstream cand_csv(out_dir / "candidates.csv");
  if (ec || !stages_csv || !cand_csv) {
    err << "error: run.out: cannot write to '" << out_dir.string() << "'\n";
    return kExitInvalid;
  }
  stages_csv << kSchemaLine << "\nseed,stage,sparsity,winner_origin,winner_ir_mean,val_acc,val_loss,epochs,wall_ms\n";
  cand_csv << kSchemaLine << "\nseed,stage,candidate_id,origin,ir_mean,emep_score\n";

  nlohmann::json config_echo = nlohmann::json::object();
  for (const auto& [k, v] : cfg.resolved)
    if (!is_execution_key(k)) config_echo[k] = v;

  nlohmann::json summary;
  summary["schema"] = 1;
  summary["config"] = config_echo;
  summary["seeds"] = nlohmann::json::array();

  int status = kExitOk;
  std::size_t inf_ir_warnings = 0;
  double acc_sum = 0.0, loss_sum = 0.0;
  std::size_t completed = 0;

  for (const auto seed : cfg.seeds) {
    prune.seed = seed;
    nlohmann::json seed_json;
    seed_json["seed"] = seed;
    seed_json["stages"] = nlohmann::json::array();

    RunHooks hooks;
    if (cfg.dump_weights)
      hooks.stage_start = [&](std::size_t t, const ModelSnapshot& snap) {
        detail::write_weight_dump(weight_dump_path(out_dir, seed, t), seed, t, prune.schedule[t], snap.network);
      };
    hooks.stage_end = [&](const StageReport& r, const MaskedNetwork&) {
      stages_csv << seed << ',' << r.stage << ',' << format_real(r.sparsity) << ',' << to_string(r.winner_origin)
                 << ',' << format_real(r.winner_ir_mean) << ',' << format_real(r.val_accuracy) << ','
                 << format_real(r.val_loss) << ',' << r.finetune_epochs << ',' << format_real(r.wall_ms, 6) << '\n';
      for (const auto& c : r.candidates) {
        if (std::isinf(c.ir_mean)) ++inf_ir_warnings;
        cand_csv << seed << ',' << r.stage << ',' << c.id << ',' << to_string(c.origin) << ','
                 << format_real(c.ir_mean) << ',' << (c.emep_score ? format_real(*c.emep_score) : "") << '\n';
      }
      stages_csv.flush();
      cand_csv.flush();
      seed_json["stages"].push_back({{"stage", r.stage},
                                     {"sparsity", r.sparsity},
                                     {"winner_id", r.winner_id},
                                     {"winner_origin", to_string(r.winner_origin)},
                                     {"winner_ir_mean", detail::real_or_null(r.winner_ir_mean)},
                                     {"val_acc", r.val_accuracy},
                                     {"val_loss", r.val_loss},
                                     {"epochs", r.finetune_epochs}});
    };

    try {
      const auto result = cfg.method == PruneMethod::randomized ? imp_run(prune, split.train, split.val, hooks)
                                                                : magnitude_imp_run(prune, split.train, split.val, hooks);
      const auto& last = result.stages.back();
      seed_json["dense_val_acc"] = result.dense.accuracy;
      seed_json["dense_val_loss"] = result.dense.loss;
      seed_json["final_val_acc"] = last.val_accuracy;
      seed_json["final_val_loss"] = last.val_loss;
      seed_json["status"] = "complete";
      acc_sum += last.val_accuracy;
      loss_sum += last.val_loss;
      ++completed;
      log << "seed " << seed << ": final val_acc " << format_real(last.val_accuracy, 6) << " val_loss "
          << format_real(last.val_loss, 6) << "\n";
    } catch (const std::exception& e) {
      seed_json["status"] = "aborted";
      seed_json["error"] = e.what();
      summary["seeds"].push_back(seed_json);
      err << "error: seed " << seed << ": " << e.what() << "\n";
      status = kExitRuntime;
      break;
    }
    summary["seeds"].push_back(seed_json);
  }

  if (inf_ir_warnings > 0)
    err << "warning: " << inf_ir_warnings
        << " candidate(s) pruned a set disjoint from the magnitude mask in some layer (ir = inf)\n";

  summary["mean"] = completed == 0 ? nlohmann::json(nullptr)
                                   : nlohmann::json{{"final_val_acc", acc_sum / static_cast<double>(completed)},
                                                    {"final_val_loss", loss_sum / static_cast<double>(completed)},
                                                    {"seeds", completed}};
  std::ofstream sj(out_dir / "summary.json");
  sj << summary.dump(2) << "\n";
  if (!sj) {
    err << "error: cannot write summary.json\n";
    return kExitRuntime;
  }
  return status;
}

/// `run`: config file plus dotted-key overrides.
inline int cmd_run(const std::string& config_path, const KeyValues& overrides, std::ostream& log, std::ostream& err) {
  std::ifstream in(config_path);
  if (!in) {
    err << "error: config file '" << config_path << "' not found\n";
    return kExitInvalid;
  }
  std::stringstream buf;
  buf << in.rdbuf();
  ExperimentConfig cfg;
  try {
    auto kv = parse_config_text(buf.str());
    for (const auto& [k, v] : overrides) kv[k] = v;
    cfg = build_config(kv);
  } catch (const ConfigError& e) {
    for (const auto& d : e.diagnostics) err << "config error: " << d << "\n";
    return kExitInvalid;
  }
  return run_experiment(cfg, log, err);
}

namespace detail {

inline std::optional<nlohmann::json> read_summary(const fs::path& dir, std::ostream& err) {
  const auto file = dir / "summary.json";
  std::ifstream in(file);
  if (!in) {
    err << "error: no summary.json in '" << dir.string() << "'\n";
    return std::nullopt;
  }
  try {
    auto j = nlohmann::json::parse(in);
    if (!j.contains("seeds") || !j["seeds"].is_array()) throw std::runtime_error("missing 'seeds' array");
    return j;
  } catch (const std::exception& e) {
    err << "error: '" << file.string() << "' is not a valid summary: " << e.what() << "\n";
    return std::nullopt;
  }
}

inline std::map<std::uint64_t, double> final_accuracies(const nlohmann::json& summary) {
  std::map<std::uint64_t, double> out;
  for (const auto& s : summary["seeds"])
    if (s.contains("final_val_acc") && s["final_val_acc"].is_number())
      out[s["seed"].get<std::uint64_t>()] = s["final_val_acc"].get<double>();
  return out;
}

}  // namespace detail

/// `compare`: per-seed and mean final validation accuracy of two runs, B − A.
inline int cmd_compare(const fs::path& dir_a, const fs::path& dir_b, std::ostream& out, std::ostream& err) {
  const auto a = detail::read_summary(dir_a, err);
  const auto b = detail::read_summary(dir_b, err);
  if (!a || !b) return kExitInvalid;

  const auto cfg_value = [](const nlohmann::json& s, const char* key) -> std::string {
    if (s.contains("config") && s["config"].contains(key)) return s["config"][key].get<std::string>();
    return "";
  };
  for (const char* key : {"prune.schedule", "dataset.kind", "network.hidden"})
    if (cfg_value(*a, key) != cfg_value(*b, key))
      out << "warning: runs differ in " << key << " ('" << cfg_value(*a, key) << "' vs '" << cfg_value(*b, key)
          << "')\n";

  const auto acc_a = detail::final_accuracies(*a);
  const auto acc_b = detail::final_accuracies(*b);
  std::vector<std::uint64_t> common;
  for (const auto& [seed, _] : acc_a) {
    if (acc_b.contains(seed))
      common.push_back(seed);
    else
      out << "warning: seed " << seed << " only present in A\n";
  }
  for (const auto& [seed, _] : acc_b)
    if (!acc_a.contains(seed)) out << "warning: seed " << seed << " only present in B\n";
  if (common.empty()) {
    err << "error: the runs share no completed seeds\n";
    return kExitInvalid;
  }

  char line[160];
  std::snprintf(line, sizeof line, "%-10s %12s %12s %12s\n", "seed", "acc_a", "acc_b", "diff_b_a");
  out << line;
  double sa = 0.0, sb = 0.0;
  std::size_t b_wins = 0;
  for (auto seed : common) {
    const double x = acc_a.at(seed), y = acc_b.at(seed);
    sa += x;
    sb += y;
    if (y >= x) ++b_wins;
    std::snprintf(line, sizeof line, "%-10llu %12.6f %12.6f %12.6f\n", static_cast<unsigned long long>(seed), x, y,
                  y - x);
    out << line;
  }
  const auto n = static_cast<double>(common.size());
  std::snprintf(line, sizeof line, "%-10s %12.6f %12.6f %12.6f\n", "mean", sa / n, sb / n, (sb - sa) / n);
  out << line;
  out << "b_ge_a " << b_wins << "/" << common.size() << "\n";
  return kExitOk;
}

struct WeightHistogram {
  std::vector<double> edges;  // bins + 1 edges over [0, max |w|]
  std::vector<std::size_t> counts;
  double tau = 0.0;                      // pruning boundary: k-th largest |w|
  double near_boundary_fraction = 0.0;  // share of weights with |w| in [2τ/3, 4τ/3]
};

/// Histogram of |w| with the magnitude-pruning boundary at `sparsity`.
inline WeightHistogram weight_histogram(std::span<const double> w, double sparsity, std::size_t bins) {
  if (w.empty()) throw Error("histogram of an empty layer");
  if (bins == 0) throw Error("histogram needs at least one bin");
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw Error("sparsity must lie in [0, 1)");
  const std::size_t k = w.size() - pruned_count(w.size(), sparsity);
  WeightHistogram h;
  h.tau = pruning_boundary(w, k);
  double max_abs = 0.0;
  for (double v : w) max_abs = std::max(max_abs, std::abs(v));
  h.counts.assign(bins, 0);
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(max_abs * static_cast<double>(b) / static_cast<double>(bins));
  const double lo = 2.0 * h.tau / 3.0, hi = 4.0 * h.tau / 3.0;
  std::size_t near = 0;
  for (double v : w) {
    const double m = std::abs(v);
    const auto b = max_abs > 0.0 ? static_cast<std::size_t>(m / max_abs * static_cast<double>(bins)) : 0;
    ++h.counts[std::min(b, bins - 1)];
    if (m >= lo && m <= hi) ++near;
  }
  h.near_boundary_fraction = static_cast<double>(near) / static_cast<double>(w.size());
  return h;
}

struct WeightDump {
  std::uint64_t seed = 0;
  std::size_t stage = 0;
  double sparsity = 0.0;
  std::vector<std::vector<double>> layers;
};

inline WeightDump read_weight_dump(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw Error("cannot open weight dump '" + file.string() + "'");
  std::string line;
  std::getline(in, line);
  static const std::regex header(R"(# schema=1 seed=(\d+) stage=(\d+) sparsity=(\S+))");
  std::smatch m;
  if (!std::regex_match(line, m, header)) throw Error("'" + file.string() + "' is not a schema=1 weight dump");
  WeightDump d;
  d.seed = std::stoull(m[1]);
  d.stage = std::stoul(m[2]);
  d.sparsity = std::stod(m[3]);
  std::getline(in, line);  // column header
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_commas(line);
    if (cells.size() != 3) throw Error("malformed weight dump row: " + line);
    const auto layer = std::stoul(std::string(cells[0]));
    if (layer >= d.layers.size()) d.layers.resize(layer + 1);
    d.layers[layer].push_back(std::stod(std::string(cells[2])));
  }
  return d;
}

/// `hist`: per-layer |w| histogram of a dumped stage, with τ and the share of
/// weights near it. Uses the lowest dumped seed unless one is given.
inline int cmd_hist(const fs::path& run_dir, std::size_t stage, std::size_t bins, std::optional<std::uint64_t> seed,
                    std::ostream& out, std::ostream& err) {
  if (bins == 0) {
    err << "error: --bins must be >= 1\n";
    return kExitInvalid;
  }
  fs::path file;
  if (seed) {
    file = weight_dump_path(run_dir, *seed, stage);
  } else {
    std::optional<std::uint64_t> best;
    const std::regex name("seed(\\d+)_stage" + std::to_string(stage) + "\\.csv");
    std::error_code ec;
    for (const auto& entry : fs::directory_iterator(run_dir / "weights", ec)) {
      std::smatch m;
      const auto fname = entry.path().filename().string();
      if (std::regex_match(fname, m, name)) {
        const auto s = std::stoull(m[1]);
        if (!best || s < *best) best = s;
      }
    }
    if (best) file = weight_dump_path(run_dir, *best, stage);
  }
  if (file.empty() || !fs::exists(file)) {
    err << "error: stage " << stage << " was not dumped in '" << run_dir.string()
        << "' (run with --dump-weights)\n";
    return kExitInvalid;
  }
  WeightDump dump;
  try {
    dump = read_weight_dump(file);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  }
  out << kSchemaLine << " seed=" << dump.seed << " stage=" << dump.stage
      << " sparsity=" << format_real(dump.sparsity) << "\n";
  out << "layer,bin,bin_lo,bin_hi,count,tau,near_boundary_fraction\n";
  for (std::size_t l = 0; l < dump.layers.size(); ++l) {
    const auto h = weight_histogram(dump.layers[l], dump.sparsity, bins);
    for (std::size_t b = 0; b < bins; ++b)
      out << l << ',' << b << ',' << format_real(h.edges[b]) << ',' << format_real(h.edges[b + 1]) << ','
          << h.counts[b] << ',' << format_real(h.tau) << ',' << format_real(h.near_boundary_fraction) << '\n';
  }
  return kExitOk;
}

}  // namespace randprune
