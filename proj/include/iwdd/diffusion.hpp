#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "iwdd/mlp.hpp"
#include "iwdd/rng.hpp"
#include "iwdd/tabular.hpp"

namespace iwdd {

struct NoiseSchedule {
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;
  double sigma_data = 0.5;
  double t_max = 1000.0;  // distillation draws t ~ U[0, t_max / 1000]
  double p_mean = -1.2;   // pretraining: ln sigma ~ N(p_mean, p_std^2)
  double p_std = 1.2;

  void validate() const;
};

// rho-parameterised interpolation between sigma_min (t = 0) and sigma_max (t = 1).
double sigma_of_t(const NoiseSchedule& s, double t);

struct Preconditioning {
  double c_skip;
  double c_out;
  double c_in;
  double c_noise;
};

Preconditioning precondition_coeffs(const NoiseSchedule& s, double sigma);

// lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2, so that
// lambda * c_out^2 = 1.
double edm_loss_weight(const NoiseSchedule& s, double sigma);

double sample_training_sigma(const NoiseSchedule& s, Rng& rng);

// A batch of conditioning inputs: covariates column-batched (d x B) and
// treatments as a length-B vector of 0/1 reals.
struct Conditioning {
  Eigen::MatrixXd x;
  Eigen::VectorXd z;

  Eigen::Index batch() const { return z.size(); }
};

Conditioning conditioning_for_rows(const Dataset& ds, std::span<const std::size_t> rows);
Conditioning conditioning_for_row(const Dataset& ds, std::size_t row, std::uint8_t z, Eigen::Index copies);

// Preconditioned denoiser
//   D(y_t; sigma, x, z) = c_skip y_t + c_out F(c_in y_t, c_noise, x, z).
// The same type serves as teacher, fake score network and one-step generator.
// Network input layout: [c_in * y_t, c_noise, x_1..x_d, z].
struct Denoiser {
  Mlp net;
  NoiseSchedule schedule;
  std::size_t covariate_dim = 0;

  static Denoiser create(std::size_t covariate_dim, const std::vector<std::size_t>& hidden,
                         const NoiseSchedule& schedule, std::uint64_t seed);
  void validate() const;
};

// Forward-pass record needed for gradients.
struct DenoisePass {
  Eigen::VectorXd c_skip, c_out, c_in;
  MlpCache cache;
};

Eigen::VectorXd denoise(const Denoiser& den, const Eigen::VectorXd& y_t, const Eigen::VectorXd& sigma,
                        const Conditioning& cond, DenoisePass* pass = nullptr);

// Vector-Jacobian products of a denoise call for upstream gradient g = dL/dD.
struct DenoiseGrad {
  LayerGrads params;       // empty unless requested
  Eigen::VectorXd d_input; // dL/dy_t
};

DenoiseGrad denoise_backward(const Denoiser& den, const DenoisePass& pass, const Eigen::VectorXd& upstream,
                             bool want_params);

struct PretrainConfig {
  std::size_t steps = 20000;
  std::size_t batch = 256;
  double learning_rate = 1e-3;
  // Cosine decay to lr * min_lr_fraction over `steps`; 1.0 keeps lr constant.
  double min_lr_fraction = 1.0;
  std::size_t log_every = 500;
  std::uint64_t seed = 0;
};

struct LossPoint {
  std::size_t step;
  double loss;
};

struct PretrainResult {
  Denoiser denoiser;
  std::vector<LossPoint> log;  // interval-mean training loss
};

// Trains `init` (already shaped for `ds`) on the EDM objective
// E[lambda(sigma) |D(y + sigma n; sigma, x, z) - y|^2].
PretrainResult pretrain(Denoiser init, const Dataset& ds, const PretrainConfig& cfg);

// Fixed-draw evaluation of the EDM objective, for monitoring.
double edm_loss(const Denoiser& den, const Dataset& ds, std::size_t draws_per_row, std::uint64_t seed);

// EDM time discretisation (steps points, then 0) used by the Heun sampler.
std::vector<double> heun_sigmas(const NoiseSchedule& s, std::size_t steps);

// Deterministic second-order Heun integration from sigma_max to 0.
// `start_noise` supplies the standard normal initial draw per batch column.
Eigen::VectorXd sample_reverse(const Denoiser& den, const Conditioning& cond, std::size_t steps,
                               const Eigen::VectorXd& start_noise);
Eigen::VectorXd sample_reverse(const Denoiser& den, const Conditioning& cond, std::size_t steps, std::uint64_t seed);

void write_denoiser(std::ostream& out, const Denoiser& den);
Denoiser read_denoiser(std::istream& in);
void save_denoiser(const std::filesystem::path& path, const Denoiser& den);
Denoiser load_denoiser(const std::filesystem::path& path);

}  // namespace iwdd
