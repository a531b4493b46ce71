#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "iwdd/diffusion.hpp"
#include "iwdd/mlp.hpp"
#include "iwdd/rng.hpp"
#include "iwdd/tabular.hpp"

namespace iwdd {

// One-step generator: y_g = D_theta(sigma_init * eps; sigma_init, x, z).
struct OneStepGenerator {
  Denoiser net;
  double sigma_init = 2.5;
};

// theta <- phi.
OneStepGenerator make_generator(const Denoiser& teacher, double sigma_init = 2.5);

Eigen::VectorXd generator_forward(const OneStepGenerator& gen, const Conditioning& cond, const Eigen::VectorXd& eps,
                                  DenoisePass* pass = nullptr);

// Shuffle the covariate columns and draw fresh treatments from Bernoulli(0.5).
Conditioning randomization_adjust(const Eigen::MatrixXd& x_batch, Rng& rng);

struct TimeDraw {
  double t = 0.0;
  double sigma = 0.0;
  Eigen::VectorXd eps_t;
};

// t ~ U[0, t_max / 1000], sigma_t from the rho schedule, eps_t ~ N(0, I).
TimeDraw time_and_noise(const NoiseSchedule& s, Eigen::Index batch, Rng& rng);

inline constexpr double kWeightFloor = 1e-8;

struct LossWeight {
  double value = 0.0;
  bool clamped = false;  // denominator hit kWeightFloor
};

// C / mean_i |y_g,i - teacher_i|; a constant for back-propagation.
LossWeight weight_wt(const Eigen::VectorXd& y_g, const Eigen::VectorXd& teacher_out, double c);

// Generator objective evaluated from network outputs, batch-averaged:
//   w (f_teacher - f_fake)(f_fake - y_g) + (1 - alpha) w |f_teacher - f_fake|^2
// The first factor is teacher minus fake, as in score identity distillation;
// the reverse order makes the generator climb the Fisher divergence.
// optionally scaled per example (explicit IPW). Partials are w.r.t. the three
// inputs; the networks that produced the outputs do not appear.
struct GeneratorLossTerms {
  double loss = 0.0;
  Eigen::VectorXd d_y_g;
  Eigen::VectorXd d_fake;
  Eigen::VectorXd d_teacher;
};

GeneratorLossTerms generator_loss_terms(const Eigen::VectorXd& fake_out, const Eigen::VectorXd& teacher_out,
                                        const Eigen::VectorXd& y_g, double alpha, double w,
                                        const Eigen::VectorXd* example_weights = nullptr);

struct GeneratorStep {
  double loss = 0.0;
  LossWeight w;
  LayerGrads grads;  // d loss / d theta
  Eigen::VectorXd y_g;
};

// Full generator pass: y_g -> y_t = y_g + sigma_t eps_t -> fake and teacher
// denoisers -> loss. The gradient reaches theta through y_g and through y_t
// inside both frozen denoisers. `fixed_w` overrides the data-dependent weight.
GeneratorStep generator_loss(const OneStepGenerator& gen, const Denoiser& fake, const Denoiser& teacher,
                             const Conditioning& cond, const Eigen::VectorXd& eps, const TimeDraw& td, double alpha,
                             double weight_c, const Eigen::VectorXd* example_weights = nullptr,
                             std::optional<double> fixed_w = std::nullopt);

// gamma * mean |fake_out - y_g|^2.
double fake_loss_value(const Eigen::VectorXd& fake_out, const Eigen::VectorXd& y_g, double gamma);

struct FakeStep {
  double loss = 0.0;
  LossWeight gamma;
  LayerGrads grads;  // d loss / d psi
};

// y_g is a constant target. gamma(t) uses the same normaliser as w(t) unless
// `fixed_gamma` is given.
FakeStep fake_loss(const Denoiser& fake, const Denoiser& teacher, const Eigen::VectorXd& y_g, const TimeDraw& td,
                   const Conditioning& cond, double weight_c, std::optional<double> fixed_gamma = std::nullopt);

// Logistic propensity model x -> logit pi(x).
struct PropensityModel {
  Mlp net;

  Eigen::VectorXd logits(const Eigen::MatrixXd& x_cols) const;
  Eigen::VectorXd predict(const Eigen::MatrixXd& x_cols) const;
};

struct PropensityConfig {
  std::vector<std::size_t> hidden{32};
  std::size_t steps = 3000;
  std::size_t batch = 256;
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;
};

PropensityModel propensity_fit(const Dataset& ds, const PropensityConfig& cfg);

// p_rct(z) / p(z | x) with p_rct(z) = 1/2, optionally clipped from above.
double ipw_weight(double pi_hat, int z, std::optional<double> clip = std::nullopt);
// Same weight from the logit; stays finite where pi rounds to 0 or 1.
double ipw_weight_from_logit(double logit, int z, std::optional<double> clip = std::nullopt);

// Joint is plain distillation on observational pairs with no weighting.
enum class DistillMode { Marginal, ExplicitIpw, Joint };

struct DistillConfig {
  double alpha = 0.7;
  double lr_theta = 1e-4;
  double lr_psi = 1e-4;
  double adam_beta1 = 0.9;
  std::size_t batch = 256;
  std::size_t iterations = 10000;
  double sigma_init = 2.5;
  double weight_c = 1.0;  // C in w(t) / gamma(t): the outcome dimensionality
  DistillMode mode = DistillMode::Marginal;
  std::optional<double> ipw_clip;
  std::size_t log_every = 100;
  std::uint64_t seed = 0;

  // Throws ConfigError; returns a warning string when alpha leaves [0.3, 1.2].
  std::optional<std::string> validate() const;
};

struct DistillLogRow {
  std::size_t step;
  double loss_theta;
  double loss_psi;
  double w;
  double gamma;
};

struct DistillResult {
  OneStepGenerator generator;
  Denoiser fake;
  std::vector<DistillLogRow> log;
  std::size_t completed_iterations = 0;
  std::size_t clamped_weights = 0;
  double max_example_weight = 0.0;  // explicit-IPW mode only
  // Set when training stopped on a non-finite value; generator and fake then
  // hold the last finite parameters.
  std::optional<std::string> failure;
};

// Marginal (IWDD) distillation: generator steps see shuffled covariates and
// Bernoulli(0.5) treatments; the fake network sees observational pairs.
// cfg.mode = Joint runs the same loop without adjustment or weights.
DistillResult distill(const Denoiser& teacher, const Dataset& ds, const DistillConfig& cfg);

// Explicit-IPW comparison arm: observational pairs for the generator with
// per-example weights from the propensity model.
DistillResult distill_ipw(const Denoiser& teacher, const Dataset& ds, const PropensityModel& propensity,
                          const DistillConfig& cfg);

void save_generator(const std::filesystem::path& path, const OneStepGenerator& gen);
OneStepGenerator load_generator(const std::filesystem::path& path);
void save_propensity(const std::filesystem::path& path, const PropensityModel& model);
PropensityModel load_propensity(const std::filesystem::path& path);

}  // namespace iwdd
