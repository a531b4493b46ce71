#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "iwdd/analysis.hpp"
#include "iwdd/config.hpp"
#include "iwdd/distill.hpp"
#include "iwdd/error.hpp"
#include "iwdd/tabular.hpp"
#include "iwdd/variance.hpp"

namespace iwdd {

// Per-stage seeds, all derived from RunConfig::seed.
struct StageSeeds {
  std::uint64_t data_train, data_test, init, pretrain, distill, propensity, eval, varcheck;
};
StageSeeds stage_seeds(std::uint64_t seed);

struct PreparedData {
  Dataset train, test;  // original units
  StandardizationStats stats;
  Dataset train_model;  // standardised training rows
};

// Synthetic splits from the config, or the two CSV files with default
// column names for covariate_dim covariates.
PreparedData prepare_data(const RunConfig& cfg);

// Stage functions. Each writes its own artifacts into `dir`.
Denoiser stage_pretrain(const RunConfig& cfg, const PreparedData& data, const std::filesystem::path& dir);
DistillResult stage_distill(const RunConfig& cfg, const PreparedData& data, const Denoiser& teacher,
                            const std::filesystem::path& dir);

struct EvalReport {
  MetricsReport teacher;
  MetricsReport generator;
};
EvalReport stage_eval(const RunConfig& cfg, const PreparedData& data, const Denoiser& teacher,
                      const OneStepGenerator& generator, const std::filesystem::path& dir);
GradVarianceReport stage_varcheck(const RunConfig& cfg, const PreparedData& data, const Denoiser& teacher,
                                  const Denoiser& fake, const OneStepGenerator& generator,
                                  const std::filesystem::path& dir);

struct StageRecord {
  std::string stage;
  bool ok = true;
  std::string error;
  int exit_code = 0;
};

struct PipelineResult {
  std::filesystem::path dir;
  std::vector<StageRecord> stages;
  std::optional<EvalReport> metrics;
  std::optional<GradVarianceReport> variance;

  // 0 when every stage succeeded, otherwise the exit code of the first failure.
  int exit_code() const;
};

// pretrain -> distill -> eval -> varcheck, then manifest.json. A failing stage
// is recorded in the manifest; artifacts written before it are kept.
PipelineResult run_pipeline(const RunConfig& cfg, const std::filesystem::path& dir);

struct AblationRow {
  double alpha;
  double rmse_y0_out, rmse_y1_out, pehe_out;  // seed means; NaN when every seed failed
  std::size_t failed_seeds;
};

// One teacher per seed, shared by every alpha.
std::vector<AblationRow> ablate_alpha(const RunConfig& base, const std::vector<double>& alphas,
                                      const std::vector<std::uint64_t>& seeds);
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

// JSON text for the reports (stable key order, shortest round-trip doubles).
std::string metrics_json(const EvalReport& r, const RunConfig& cfg);
std::string variance_json(const GradVarianceReport& r);

void write_text(const std::filesystem::path& path, const std::string& text);
void write_loss_csv(const std::filesystem::path& path, const std::vector<LossPoint>& log);
void write_distill_csv(const std::filesystem::path& path, const std::vector<DistillLogRow>& log);

}  // namespace iwdd
