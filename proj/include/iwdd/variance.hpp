#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "iwdd/diffusion.hpp"
#include "iwdd/distill.hpp"
#include "iwdd/rng.hpp"

namespace iwdd {

// Per-example noise shared by both estimators (matched-noise design).
struct ExampleNoise {
  Eigen::VectorXd eps;    // generator input noise
  Eigen::VectorXd sigma;  // sigma_t per example
  Eigen::VectorXd eps_t;  // forward-diffusion noise
};

// A family of per-example gradients g(x, z; noise). Implementations only have
// to report batch sums, which keeps the Monte Carlo loop free of P-sized
// per-example storage.
class GradientSource {
 public:
  virtual ~GradientSource() = default;
  virtual std::size_t dimension() const = 0;
  virtual ExampleNoise draw_noise(Eigen::Index batch, Rng& rng) const = 0;
  // For per-example scaled gradients s_i g_i: sum += sum_i s_i g_i,
  // sum_sq += sum_i (s_i g_i)^2 elementwise, sq_norm[i] = |s_i g_i|^2.
  virtual void accumulate(const Conditioning& cond, const ExampleNoise& noise, const Eigen::VectorXd& scale,
                          Eigen::VectorXd& sum, Eigen::VectorXd& sum_sq, Eigen::VectorXd& sq_norm) const = 0;
};

// g(x, z) = gradient w.r.t. theta of the single-example generator loss with
// w(t) held at 1 and the networks frozen.
class GeneratorGradientSource : public GradientSource {
 public:
  GeneratorGradientSource(const OneStepGenerator& gen, const Denoiser& fake, const Denoiser& teacher, double alpha);
  std::size_t dimension() const override;
  ExampleNoise draw_noise(Eigen::Index batch, Rng& rng) const override;
  void accumulate(const Conditioning& cond, const ExampleNoise& noise, const Eigen::VectorXd& scale,
                  Eigen::VectorXd& sum, Eigen::VectorXd& sum_sq, Eigen::VectorXd& sq_norm) const override;

 private:
  const OneStepGenerator& gen_;
  const Denoiser& fake_;
  const Denoiser& teacher_;
  double alpha_;
};

// g(x, z) = c for every example.
class ConstantGradientSource : public GradientSource {
 public:
  explicit ConstantGradientSource(Eigen::VectorXd c) : c_(std::move(c)) {}
  std::size_t dimension() const override { return static_cast<std::size_t>(c_.size()); }
  ExampleNoise draw_noise(Eigen::Index batch, Rng& rng) const override;
  void accumulate(const Conditioning& cond, const ExampleNoise& noise, const Eigen::VectorXd& scale,
                  Eigen::VectorXd& sum, Eigen::VectorXd& sum_sq, Eigen::VectorXd& sq_norm) const override;

 private:
  Eigen::VectorXd c_;
};

using CovariateSampler = std::function<Eigen::VectorXd(Rng&)>;
using PropensityFn = std::function<double(const Eigen::VectorXd&)>;

struct VarianceConfig {
  std::size_t n_mc = 10000;
  std::size_t blocks = 20;      // jackknife blocks; also the unit of parallel work
  std::size_t chunk = 250;      // examples per accumulate call
  std::uint64_t seed = 0;
  bool keep_norms = false;      // retain per-example gradient norms
};

struct GradVarianceReport {
  double trace_var_ipw = 0.0;
  double trace_var_iwdd = 0.0;
  double trace_gap = 0.0;  // ipw - iwdd
  // Jackknife standard errors: ipw, iwdd, gap (joint, from the paired blocks).
  std::vector<double> mc_std_errors;
  std::size_t n_mc = 0;
  std::string propensity_regime;
  std::vector<double> norms_ipw, norms_iwdd;
};

// ghat_IPW = w(x, z) g(x, z) with (x, z) ~ p(x) p(z | x), versus
// ghat_IWDD = g(x, z) with x ~ p(x), z ~ Bernoulli(1/2). Both use the same
// covariate draw and noise per Monte Carlo index. Blocks run in parallel.
GradVarianceReport grad_variance_experiment(const GradientSource& source, const CovariateSampler& sample_x,
                                            const PropensityFn& propensity, const VarianceConfig& cfg,
                                            std::string regime = {});
// Single-threaded reference; produces the same report bit for bit.
GradVarianceReport grad_variance_experiment_serial(const GradientSource& source, const CovariateSampler& sample_x,
                                                   const PropensityFn& propensity, const VarianceConfig& cfg,
                                                   std::string regime = {});

}  // namespace iwdd
