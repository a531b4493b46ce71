// iwdd: command-line driver for pretraining, distillation and evaluation.

#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>

#include <omp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "iwdd/analysis.hpp"
#include "iwdd/config.hpp"
#include "iwdd/error.hpp"
#include "iwdd/pipeline.hpp"

namespace fs = std::filesystem;
using namespace iwdd;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string dir;
  int threads = 0;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_file, "key = value config file");
  cmd->add_option("--set", c.overrides, "override one key (key=value); repeatable, applied after the file");
  cmd->add_option("-d,--dir", c.dir, "run directory (default: $IWDD_OUTPUT_ROOT/<run_name>)");
  cmd->add_option("-j,--threads", c.threads, "OpenMP threads for evaluation kernels (0 = runtime default)");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config_file.empty() ? RunConfig{} : load_config(c.config_file);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  validate(cfg);
  if (c.threads > 0) omp_set_num_threads(c.threads);
  return cfg;
}

fs::path run_dir(const Common& c, const RunConfig& cfg) {
  fs::path dir = c.dir.empty() ? output_root() / cfg.run_name : fs::path(c.dir);
  fs::create_directories(dir);
  return dir;
}

template <class T>
std::vector<T> parse_list(const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream is(item);
    T v{};
    if (!(is >> v)) throw ConfigError("cannot parse list item '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

void print_metrics(const char* label, const MetricsReport& m) {
  std::printf("%-10s rmse_y0_in %.4f rmse_y1_in %.4f rmse_y0_out %.4f rmse_y1_out %.4f pehe_in %.4f pehe_out %.4f\n",
              label, m.rmse_y0_in, m.rmse_y1_in, m.rmse_y0_out, m.rmse_y1_out, m.pehe_in, m.pehe_out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Importance-weighted diffusion distillation for potential-outcome estimation"};
  app.require_subcommand(1);

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "write a synthetic covariate-shift split as CSV");
  std::size_t synth_n = 2000;
  std::string synth_domain = "train", synth_out;
  double synth_noise = 0.1;
  std::uint64_t synth_seed = 0;
  synth->add_option("-n,--rows", synth_n, "number of rows");
  synth->add_option("--domain", synth_domain, "train (z = 1{x < -1}) or test (z ~ Bernoulli(0.5))")
      ->check(CLI::IsMember({"train", "test"}));
  synth->add_option("--noise", synth_noise, "outcome noise standard deviation");
  synth->add_option("--seed", synth_seed, "random seed");
  synth->add_option("-o,--out", synth_out, "output CSV")->required();

  Common pre_c, dist_c, eval_c, var_c, run_c, abl_c;
  auto* pre = app.add_subcommand("pretrain", "train the conditional diffusion teacher");
  add_common(pre, pre_c);

  auto* dist = app.add_subcommand("distill", "distill a one-step generator from teacher.ckpt");
  add_common(dist, dist_c);
  std::string mode;
  std::optional<double> alpha, clip;
  dist->add_option("--mode", mode, "marginal (IWDD), ipw or joint")->check(CLI::IsMember({"marginal", "ipw", "joint"}));
  dist->add_option("--alpha", alpha, "generator loss alpha");
  dist->add_option("--clip", clip, "upper clip for importance weights (ipw mode)");

  auto* ev = app.add_subcommand("eval", "evaluate teacher.ckpt and generator.ckpt");
  add_common(ev, eval_c);

  auto* var = app.add_subcommand("varcheck", "gradient-variance comparison of IPW and IWDD estimators");
  add_common(var, var_c);

  auto* lemma = app.add_subcommand("lemma-check", "check the importance-weight identity numerically");
  std::string lemma_mode = "exact";
  std::size_t lemma_trials = 50, lemma_n = 100000;
  std::uint64_t lemma_seed = 0;
  lemma->add_option("--mode", lemma_mode, "exact (random discrete joints) or sampled")
      ->check(CLI::IsMember({"exact", "sampled"}));
  lemma->add_option("--trials", lemma_trials, "exact mode: number of random joints");
  lemma->add_option("-n,--samples", lemma_n, "sampled mode: draws per sample set");
  lemma->add_option("--seed", lemma_seed, "random seed");

  auto* abl = app.add_subcommand("ablate-alpha", "seed-averaged out-of-sample metrics over an alpha grid");
  add_common(abl, abl_c);
  std::string alphas_text = "0.3,0.5,0.7,1.0,1.2", seeds_text = "0,1,2";
  abl->add_option("--alphas", alphas_text, "comma-separated alpha grid");
  abl->add_option("--seeds", seeds_text, "comma-separated seeds");

  auto* run = app.add_subcommand("run", "full pipeline: pretrain, distill, eval, varcheck");
  add_common(run, run_c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) {
      const auto ds = generate_synthetic(synth_n, synth_domain == "train" ? Domain::Train : Domain::Test, synth_noise,
                                         synth_seed);
      write_csv(ds, synth_out, default_columns(1, true));
      std::printf("wrote %zu rows to %s (treated fraction %.4f)\n", ds.size(), synth_out.c_str(), treated_fraction(ds));
      return 0;
    }
    if (*pre) {
      const auto cfg = resolve(pre_c);
      const auto dir = run_dir(pre_c, cfg);
      write_text(dir / "config.txt", config_to_text(cfg));
      stage_pretrain(cfg, prepare_data(cfg), dir);
      std::printf("teacher written to %s\n", (dir / "teacher.ckpt").c_str());
      return 0;
    }
    if (*dist) {
      auto cfg = resolve(dist_c);
      if (!mode.empty()) apply_setting(cfg, "distill.mode", mode);
      if (alpha) cfg.distill.alpha = *alpha;
      if (clip) cfg.distill.ipw_clip = *clip;
      if (const auto warn = cfg.distill.validate()) std::fprintf(stderr, "warning: %s\n", warn->c_str());
      const auto dir = run_dir(dist_c, cfg);
      const auto res = stage_distill(cfg, prepare_data(cfg), load_denoiser(dir / "teacher.ckpt"), dir);
      if (res.clamped_weights) std::fprintf(stderr, "warning: %zu clamped loss weights\n", res.clamped_weights);
      if (cfg.distill.mode == DistillMode::ExplicitIpw)
        std::printf("max importance weight %.4f\n", res.max_example_weight);
      std::printf("generator written to %s\n", (dir / "generator.ckpt").c_str());
      return 0;
    }
    if (*ev) {
      const auto cfg = resolve(eval_c);
      const auto dir = run_dir(eval_c, cfg);
      const auto r = stage_eval(cfg, prepare_data(cfg), load_denoiser(dir / "teacher.ckpt"),
                                load_generator(dir / "generator.ckpt"), dir);
      print_metrics("teacher", r.teacher);
      print_metrics("generator", r.generator);
      return 0;
    }
    if (*var) {
      const auto cfg = resolve(var_c);
      const auto dir = run_dir(var_c, cfg);
      const auto r = stage_varcheck(cfg, prepare_data(cfg), load_denoiser(dir / "teacher.ckpt"),
                                    load_denoiser(dir / "fake.ckpt"), load_generator(dir / "generator.ckpt"), dir);
      std::fputs(variance_json(r).c_str(), stdout);
      return 0;
    }
    if (*lemma) {
      nlohmann::ordered_json out;
      if (lemma_mode == "exact") {
        Rng rng(lemma_seed);
        double worst = 0.0;
        for (std::size_t t = 0; t < lemma_trials; ++t) {
          DiscreteJoint joint;
          const std::size_t k = 2 + rng.index(9);
          double total = 0.0;
          std::vector<double> h0(k), h1(k);
          for (std::size_t i = 0; i < k; ++i) {
            joint.p_x.push_back(rng.uniform(0.05, 1.0));
            joint.propensity.push_back(rng.uniform(0.02, 0.98));
            h0[i] = rng.uniform(-1.0, 1.0);
            h1[i] = rng.uniform(-1.0, 1.0);
            total += joint.p_x.back();
          }
          for (auto& p : joint.p_x) p /= total;
          const auto r = lemma1_check(joint, [&](std::size_t x, int z) { return z ? h1[x] : h0[x]; });
          worst = std::max(worst, std::abs(r.gap));
        }
        out["mode"] = "exact";
        out["trials"] = lemma_trials;
        out["max_abs_gap"] = worst;
      } else {
        // Logistic propensity fitted on the synthetic training split.
        PropensityConfig pc;
        pc.hidden.clear();
        pc.seed = lemma_seed;
        pc.steps = 500;
        const auto model = propensity_fit(generate_synthetic(2000, Domain::Train, 0.1, lemma_seed + 1), pc);
        const auto r = lemma1_sampled(
            [&model](const Eigen::VectorXd& x) { return model.predict(x)[0]; },
            [](const Eigen::VectorXd& x, int z) { return std::sin(2.0 * x[0]) + z * std::tanh(x[0]); }, 1, lemma_n,
            lemma_seed + 2);
        out["mode"] = "sampled";
        out["n"] = lemma_n;
        out["lhs"] = r.lhs;
        out["rhs"] = r.rhs;
        out["gap"] = r.gap;
        out["std_error"] = r.std_error;
      }
      std::puts(out.dump(2).c_str());
      return 0;
    }
    if (*abl) {
      const auto cfg = resolve(abl_c);
      const auto dir = run_dir(abl_c, cfg);
      const auto rows = ablate_alpha(cfg, parse_list<double>(alphas_text), parse_list<std::uint64_t>(seeds_text));
      write_ablation_csv(dir / "ablation_alpha.csv", rows);
      for (const auto& r : rows)
        std::printf("alpha %.2f rmse_y0_out %.4f rmse_y1_out %.4f pehe_out %.4f failed %zu\n", r.alpha, r.rmse_y0_out,
                    r.rmse_y1_out, r.pehe_out, r.failed_seeds);
      return 0;
    }
    if (*run) {
      const auto cfg = resolve(run_c);
      const auto dir = run_dir(run_c, cfg);
      const auto res = run_pipeline(cfg, dir);
      for (const auto& s : res.stages)
        std::printf("%-9s %s%s%s\n", s.stage.c_str(), s.ok ? "ok" : "FAILED", s.ok ? "" : ": ", s.error.c_str());
      if (res.metrics) {
        print_metrics("teacher", res.metrics->teacher);
        print_metrics("generator", res.metrics->generator);
      }
      if (res.variance)
        std::printf("trace var ipw %.6g iwdd %.6g gap %.6g (se %.3g)\n", res.variance->trace_var_ipw,
                    res.variance->trace_var_iwdd, res.variance->trace_gap, res.variance->mc_std_errors[2]);
      std::printf("artifacts in %s\n", dir.c_str());
      return res.exit_code();
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
