#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "iwdd/diffusion.hpp"
#include "iwdd/distill.hpp"
#include "iwdd/variance.hpp"

namespace iwdd {

// Everything a pipeline run depends on. Sub-seeds for each stage are derived
// from `seed`, so one number pins the whole run.
struct RunConfig {
  // data
  std::string data = "synthetic";  // "synthetic" or "csv"
  std::string train_csv, test_csv;
  std::size_t n_train = 2000, n_test = 2000;
  double noise_std = 0.1;
  std::size_t covariate_dim = 1;  // csv: number of x columns

  // model
  std::vector<std::size_t> hidden{128, 128, 128};
  NoiseSchedule schedule;
  PretrainConfig pretrain;
  DistillConfig distill;

  // evaluation
  std::size_t eval_samples = 50;
  std::size_t teacher_steps = 18;

  // gradient-variance report written alongside a run
  bool varcheck = true;
  VarianceConfig variance{2000, 10, 250, 0, false};
  double varcheck_slope = 3.0;  // pi(x) = logistic(slope * x)

  std::uint64_t seed = 0;
  std::string run_name = "run";
};

// Grammar: one `key = value` per line; `#` starts a comment; blank lines are
// ignored. Keys are the dotted names printed by config_to_text. Lists are
// comma separated. Unknown keys and bad values throw ConfigError naming the
// line.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

// Applies a single `key=value` override (the form taken by --set).
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);
void apply_override(RunConfig& cfg, const std::string& assignment);

// Canonical text form: every key, fixed order, round-trip exact.
std::string config_to_text(const RunConfig& cfg);
// FNV-1a 64 of the canonical text, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

// Throws ConfigError on inconsistent values.
void validate(const RunConfig& cfg);

// $IWDD_OUTPUT_ROOT when set, otherwise ./iwdd_runs.
std::filesystem::path output_root();

}  // namespace iwdd
