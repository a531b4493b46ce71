#include "iwdd/pipeline.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace iwdd {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return {buf, r.ptr};
}

ordered_json metrics_object(const MetricsReport& m) {
  return {{"rmse_y0_in", m.rmse_y0_in},   {"rmse_y1_in", m.rmse_y1_in}, {"rmse_y0_out", m.rmse_y0_out},
          {"rmse_y1_out", m.rmse_y1_out}, {"pehe_in", m.pehe_in},       {"pehe_out", m.pehe_out},
          {"n_eval_samples_per_unit", m.n_eval_samples_per_unit}};
}

void write_po_scatter(const Dataset& ds, const char* split, const PoPredictions& teacher,
                      const PoPredictions& gen, std::ofstream& out) {
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out << split << ',' << i << ',' << int(ds.treatments[i]);
    for (Eigen::Index c = 0; c < ds.covariates.cols(); ++c) out << ',' << num(ds.covariates(r, c));
    out << ',' << num((*ds.true_y0)[r]) << ',' << num((*ds.true_y1)[r]) << ',' << num(teacher.y0[r]) << ','
        << num(teacher.y1[r]) << ',' << num(gen.y0[r]) << ',' << num(gen.y1[r]) << '\n';
  }
}

}  // namespace

StageSeeds stage_seeds(std::uint64_t seed) {
  const std::uint64_t b = seed * 16;
  return {b + 1, b + 2, b + 3, b + 4, b + 5, b + 6, b + 7, b + 8};
}

PreparedData prepare_data(const RunConfig& cfg) {
  validate(cfg);
  PreparedData d;
  if (cfg.data == "synthetic") {
    const auto s = stage_seeds(cfg.seed);
    d.train = generate_synthetic(cfg.n_train, Domain::Train, cfg.noise_std, s.data_train);
    d.test = generate_synthetic(cfg.n_test, Domain::Test, cfg.noise_std, s.data_test);
  } else {
    d.train = load_csv(cfg.train_csv, default_columns(cfg.covariate_dim, true));
    d.test = load_csv(cfg.test_csv, default_columns(cfg.covariate_dim, true));
  }
  d.stats = fit_standardization(d.train);
  d.train_model = apply_standardization(d.train, d.stats);
  return d;
}

Denoiser stage_pretrain(const RunConfig& cfg, const PreparedData& data, const fs::path& dir) {
  const auto s = stage_seeds(cfg.seed);
  auto init = Denoiser::create(data.train.dim(), cfg.hidden, cfg.schedule, s.init);
  PretrainConfig pc = cfg.pretrain;
  pc.seed = s.pretrain;
  auto result = pretrain(std::move(init), data.train_model, pc);
  save_denoiser(dir / "teacher.ckpt", result.denoiser);
  write_loss_csv(dir / "pretrain_loss.csv", result.log);
  return result.denoiser;
}

DistillResult stage_distill(const RunConfig& cfg, const PreparedData& data, const Denoiser& teacher,
                            const fs::path& dir) {
  const auto s = stage_seeds(cfg.seed);
  DistillConfig dc = cfg.distill;
  dc.seed = s.distill;
  DistillResult result;
  if (dc.mode == DistillMode::ExplicitIpw) {
    PropensityConfig pc;
    pc.seed = s.propensity;
    const auto model = propensity_fit(data.train_model, pc);
    save_propensity(dir / "propensity.ckpt", model);
    result = distill_ipw(teacher, data.train_model, model, dc);
  } else {
    result = distill(teacher, data.train_model, dc);
  }
  // On failure these hold the last finite parameters.
  save_generator(dir / "generator.ckpt", result.generator);
  save_denoiser(dir / "fake.ckpt", result.fake);
  write_distill_csv(dir / "distill_loss.csv", result.log);
  if (result.failure) throw TrainingError(*result.failure);
  return result;
}

EvalReport stage_eval(const RunConfig& cfg, const PreparedData& data, const Denoiser& teacher,
                      const OneStepGenerator& generator, const fs::path& dir) {
  const auto s = stage_seeds(cfg.seed);
  const auto t = evaluate(teacher_sampler(teacher, cfg.teacher_steps), data.train, data.test, data.stats,
                          cfg.eval_samples, s.eval);
  const auto g = evaluate(generator_sampler(generator), data.train, data.test, data.stats, cfg.eval_samples, s.eval);
  EvalReport report{t.metrics, g.metrics};
  write_text(dir / "metrics.json", metrics_json(report, cfg));

  std::ofstream out(dir / "po_scatter.csv");
  if (!out) throw EvaluationError("cannot write " + (dir / "po_scatter.csv").string());
  out << "split,row,z";
  for (std::size_t c = 0; c < data.train.dim(); ++c) out << ",x" << c;
  out << ",true_y0,true_y1,teacher_y0,teacher_y1,generator_y0,generator_y1\n";
  write_po_scatter(data.train, "in", t.train, g.train, out);
  write_po_scatter(data.test, "out", t.test, g.test, out);
  return report;
}

GradVarianceReport stage_varcheck(const RunConfig& cfg, const PreparedData& data, const Denoiser& teacher,
                                  const Denoiser& fake, const OneStepGenerator& generator, const fs::path& dir) {
  const auto s = stage_seeds(cfg.seed);
  const GeneratorGradientSource source(generator, fake, teacher, cfg.distill.alpha);
  const Dataset& ds = data.train_model;
  const CovariateSampler sample_x = [&ds](Rng& rng) {
    return Eigen::VectorXd(ds.covariates.row(static_cast<Eigen::Index>(rng.index(ds.size()))).transpose());
  };
  const double slope = cfg.varcheck_slope;
  const PropensityFn propensity = [slope](const Eigen::VectorXd& x) { return 1.0 / (1.0 + std::exp(-slope * x[0])); };
  VarianceConfig vc = cfg.variance;
  vc.seed = s.varcheck;
  auto report = grad_variance_experiment(source, sample_x, propensity, vc, "logistic(" + num(slope) + " * x0)");
  write_text(dir / "grad_variance.json", variance_json(report));
  return report;
}

int PipelineResult::exit_code() const {
  for (const auto& s : stages)
    if (!s.ok) return s.exit_code;
  return 0;
}

PipelineResult run_pipeline(const RunConfig& cfg, const fs::path& dir) {
  validate(cfg);
  fs::create_directories(dir);
  write_text(dir / "config.txt", config_to_text(cfg));
  PipelineResult res;
  res.dir = dir;

  std::optional<PreparedData> data;
  std::optional<Denoiser> teacher;
  std::optional<DistillResult> distilled;
  auto stage = [&res](const char* name, auto&& body) {
    StageRecord rec;
    rec.stage = name;
    try {
      body();
    } catch (const Error& e) {
      rec.ok = false;
      rec.error = e.what();
      rec.exit_code = static_cast<int>(e.kind());
    } catch (const std::exception& e) {
      rec.ok = false;
      rec.error = e.what();
      rec.exit_code = 2;
    }
    res.stages.push_back(rec);
    return rec.ok;
  };

  bool ok = stage("data", [&] { data = prepare_data(cfg); });
  ok = ok && stage("pretrain", [&] { teacher = stage_pretrain(cfg, *data, dir); });
  ok = ok && stage("distill", [&] { distilled = stage_distill(cfg, *data, *teacher, dir); });
  ok = ok && stage("eval", [&] { res.metrics = stage_eval(cfg, *data, *teacher, distilled->generator, dir); });
  if (ok && cfg.varcheck)
    stage("varcheck", [&] { res.variance = stage_varcheck(cfg, *data, *teacher, distilled->fake, distilled->generator, dir); });

  ordered_json manifest;
  manifest["version"] = kVersion;
  manifest["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                      std::to_string(EIGEN_MINOR_VERSION);
  manifest["config_hash"] = config_hash(cfg);
  manifest["seed"] = cfg.seed;
  manifest["run_name"] = cfg.run_name;
  ordered_json stages = ordered_json::array();
  for (const auto& s : res.stages) {
    ordered_json j{{"stage", s.stage}, {"status", s.ok ? "ok" : "failed"}};
    if (!s.ok) j["error"] = s.error;
    stages.push_back(j);
  }
  manifest["stages"] = stages;
  ordered_json files = ordered_json::array();
  for (const char* f : {"config.txt", "teacher.ckpt", "pretrain_loss.csv", "propensity.ckpt", "generator.ckpt",
                        "fake.ckpt", "distill_loss.csv", "metrics.json", "po_scatter.csv", "grad_variance.json"})
    if (fs::exists(dir / f)) files.push_back(f);
  manifest["artifacts"] = files;
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  return res;
}

std::vector<AblationRow> ablate_alpha(const RunConfig& base, const std::vector<double>& alphas,
                                      const std::vector<std::uint64_t>& seeds) {
  if (alphas.empty()) throw ConfigError("ablate_alpha: alpha grid is empty");
  if (seeds.empty()) throw ConfigError("ablate_alpha: seed list is empty");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<AblationRow> rows;
  for (double a : alphas) rows.push_back({a, 0.0, 0.0, 0.0, 0});
  std::vector<std::size_t> ok(alphas.size(), 0);

  for (const auto seed : seeds) {
    RunConfig cfg = base;
    cfg.seed = seed;
    const auto data = prepare_data(cfg);
    const auto s = stage_seeds(seed);
    auto init = Denoiser::create(data.train.dim(), cfg.hidden, cfg.schedule, s.init);
    PretrainConfig pc = cfg.pretrain;
    pc.seed = s.pretrain;
    const auto teacher = pretrain(std::move(init), data.train_model, pc).denoiser;
    for (std::size_t k = 0; k < alphas.size(); ++k) {
      try {
        DistillConfig dc = cfg.distill;
        dc.alpha = alphas[k];
        dc.seed = s.distill;
        const auto d = distill(teacher, data.train_model, dc);
        if (d.failure) throw TrainingError(*d.failure);
        const auto m =
            evaluate(generator_sampler(d.generator), data.train, data.test, data.stats, cfg.eval_samples, s.eval)
                .metrics;
        rows[k].rmse_y0_out += m.rmse_y0_out;
        rows[k].rmse_y1_out += m.rmse_y1_out;
        rows[k].pehe_out += m.pehe_out;
        ++ok[k];
      } catch (const Error&) {
        ++rows[k].failed_seeds;
      }
    }
  }
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (ok[k] == 0) {
      rows[k].rmse_y0_out = rows[k].rmse_y1_out = rows[k].pehe_out = nan;
      continue;
    }
    const double n = static_cast<double>(ok[k]);
    rows[k].rmse_y0_out /= n;
    rows[k].rmse_y1_out /= n;
    rows[k].pehe_out /= n;
  }
  return rows;
}

void write_ablation_csv(const fs::path& path, const std::vector<AblationRow>& rows) {
  std::string text = "alpha,rmse_y0_out,rmse_y1_out,pehe_out,failed_seeds\n";
  auto cell = [](double v) { return std::isnan(v) ? std::string() : num(v); };
  for (const auto& r : rows)
    text += num(r.alpha) + ',' + cell(r.rmse_y0_out) + ',' + cell(r.rmse_y1_out) + ',' + cell(r.pehe_out) + ',' +
            std::to_string(r.failed_seeds) + '\n';
  write_text(path, text);
}

std::string metrics_json(const EvalReport& r, const RunConfig& cfg) {
  ordered_json j;
  j["config_hash"] = config_hash(cfg);
  j["seed"] = cfg.seed;
  j["teacher"] = metrics_object(r.teacher);
  j["teacher"]["sampler"] = "heun-" + std::to_string(cfg.teacher_steps);
  j["generator"] = metrics_object(r.generator);
  j["generator"]["sampler"] = "one-step";
  return j.dump(2) + "\n";
}

std::string variance_json(const GradVarianceReport& r) {
  ordered_json j;
  j["trace_var_ipw"] = r.trace_var_ipw;
  j["trace_var_iwdd"] = r.trace_var_iwdd;
  j["trace_gap"] = r.trace_gap;
  j["mc_std_errors"] = {{"ipw", r.mc_std_errors.at(0)}, {"iwdd", r.mc_std_errors.at(1)}, {"gap", r.mc_std_errors.at(2)}};
  j["n_mc"] = r.n_mc;
  j["propensity_regime"] = r.propensity_regime;
  return j.dump(2) + "\n";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

void write_loss_csv(const fs::path& path, const std::vector<LossPoint>& log) {
  std::string text = "step,loss\n";
  for (const auto& p : log) text += std::to_string(p.step) + ',' + num(p.loss) + '\n';
  write_text(path, text);
}

void write_distill_csv(const fs::path& path, const std::vector<DistillLogRow>& log) {
  std::string text = "step,loss_theta,loss_psi,w,gamma\n";
  for (const auto& r : log)
    text += std::to_string(r.step) + ',' + num(r.loss_theta) + ',' + num(r.loss_psi) + ',' + num(r.w) + ',' +
            num(r.gamma) + '\n';
  write_text(path, text);
}

}  // namespace iwdd
