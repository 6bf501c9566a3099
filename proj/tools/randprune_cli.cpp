// Command-line front end: run / compare / hist.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "randprune/experiment.hpp"

namespace {

// Turns leftover `--dotted.key value` / `--dotted.key=value` arguments into overrides.
bool collect_overrides(const std::vector<std::string>& extras, randprune::KeyValues& out) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const auto& arg = extras[i];
    if (arg.rfind("--", 0) != 0 || arg.size() <= 2) {
      std::cerr << "config error: unexpected argument '" << arg << "'\n";
      return false;
    }
    const auto body = arg.substr(2);
    if (const auto eq = body.find('='); eq != std::string::npos) {
      out[body.substr(0, eq)] = body.substr(eq + 1);
    } else if (i + 1 < extras.size()) {
      out[body] = extras[++i];
    } else {
      std::cerr << "config error: " << body << ": missing value\n";
      return false;
    }
  }
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Randomized pruning-mask generation and selection"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::size_t> parallel;
  bool dump_weights = false;
  auto* run = app.add_subcommand("run", "Run an experiment described by a config file");
  run->add_option("--config", config_path, "Config file (key = value lines)")->required();
  run->add_option("--seed", seed, "Run a single seed instead of run.seeds");
  run->add_option("--out", out_dir, "Output directory");
  run->add_option("--parallel", parallel, "Worker threads for candidate evaluation");
  run->add_flag("--dump-weights", dump_weights, "Dump stage-start weights for `hist`");
  run->allow_extras();

  std::string dir_a, dir_b;
  auto* compare = app.add_subcommand("compare", "Compare final accuracies of two runs");
  compare->add_option("run_a", dir_a, "Baseline run directory")->required();
  compare->add_option("run_b", dir_b, "Candidate run directory")->required();

  std::string hist_dir;
  std::size_t stage = 0;
  std::size_t bins = 20;
  std::optional<std::uint64_t> hist_seed;
  auto* hist = app.add_subcommand("hist", "Histogram of |w| per layer for a dumped stage");
  hist->add_option("run_dir", hist_dir, "Run directory")->required();
  hist->add_option("--stage", stage, "Stage index");
  hist->add_option("--bins", bins, "Number of histogram bins");
  hist->add_option("--seed", hist_seed, "Seed whose dump to read (default: lowest)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : randprune::kExitInvalid;
  }

  if (*run) {
    randprune::KeyValues overrides;
    if (!collect_overrides(run->remaining(), overrides)) return randprune::kExitInvalid;
    if (seed) overrides["run.seeds"] = std::to_string(*seed);
    if (out_dir) overrides["run.out"] = *out_dir;
    if (parallel) overrides["run.parallel"] = std::to_string(*parallel);
    if (dump_weights) overrides["run.dump_weights"] = "true";
    return randprune::cmd_run(config_path, overrides, std::cout, std::cerr);
  }
  if (*compare) return randprune::cmd_compare(dir_a, dir_b, std::cout, std::cerr);
  return randprune::cmd_hist(hist_dir, stage, bins, hist_seed, std::cout, std::cerr);
}
