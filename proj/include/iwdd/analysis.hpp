#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "iwdd/diffusion.hpp"
#include "iwdd/distill.hpp"
#include "iwdd/tabular.hpp"

namespace iwdd {

// Draws one outcome per noise entry for a batch of identical (x, z) columns,
// in model (standardised) units.
using ConditionalSampler = std::function<Eigen::VectorXd(const Conditioning&, const Eigen::VectorXd& noise)>;

ConditionalSampler generator_sampler(const OneStepGenerator& gen);
ConditionalSampler teacher_sampler(const Denoiser& teacher, std::size_t steps = 18);

struct PoPredictions {
  Eigen::VectorXd y0, y1;
  Eigen::VectorXd se0, se1;  // Monte Carlo standard error of each row mean
};

// Per row, the mean of `m` sampler draws at (x_i, 0) and (x_i, 1). Row i,
// arm k uses its own stream Rng(seed, i, k), so the result does not depend on
// the thread count. `ds` holds model-scale covariates; predictions are mapped
// back through `stats` when given.
PoPredictions predict_po(const ConditionalSampler& sampler, const Dataset& ds, std::size_t m, std::uint64_t seed,
                         const StandardizationStats* stats = nullptr);
// Single-threaded reference implementation of predict_po.
PoPredictions predict_po_serial(const ConditionalSampler& sampler, const Dataset& ds, std::size_t m,
                                std::uint64_t seed, const StandardizationStats* stats = nullptr);

double rmse(const Eigen::VectorXd& predicted, const Eigen::VectorXd& actual);
double pehe(const Eigen::VectorXd& tau_hat, const Eigen::VectorXd& tau);

// scores: methods x datasets. Each method's percentage of datasets on which it
// attains the best score; every tied method is credited.
std::vector<double> win_rates(const Eigen::MatrixXd& scores, bool lower_is_better = true);

struct MetricsReport {
  double rmse_y0_in = 0.0, rmse_y0_out = 0.0;
  double rmse_y1_in = 0.0, rmse_y1_out = 0.0;
  double pehe_in = 0.0, pehe_out = 0.0;
  std::size_t n_eval_samples_per_unit = 0;
};

struct EvaluationOutput {
  MetricsReport metrics;
  PoPredictions train;
  PoPredictions test;
};

// In-sample metrics use the training rows, out-of-sample metrics the test
// rows. RMSE for Y(k) is taken over the rows whose observed treatment is k
// against the oracle potential outcome; PEHE over all rows of the split.
// Datasets are in original units; covariates are mapped through `stats`.
EvaluationOutput evaluate(const ConditionalSampler& sampler, const Dataset& train, const Dataset& test,
                          const StandardizationStats& stats, std::size_t m, std::uint64_t seed);

// 1 / (4 pi (1 - pi)) - 1.
double delta_pi(double pi);

struct Lemma1Result {
  double lhs = 0.0;  // E_joint[w h]
  double rhs = 0.0;  // E_product[h]
  double gap = 0.0;
  double std_error = 0.0;
};

// Discrete joint over x in {0..K-1}: p(x) and pi(x) = p(z = 1 | x).
struct DiscreteJoint {
  std::vector<double> p_x;
  std::vector<double> propensity;
};

using DiscreteTestFn = std::function<double(std::size_t x, int z)>;
using TestFn = std::function<double(const Eigen::VectorXd& x, int z)>;

// Exact enumeration of both sides. Throws DataError when overlap fails.
Lemma1Result lemma1_check(const DiscreteJoint& joint, const DiscreteTestFn& h);

// Sampled form: a joint sample with propensities (columns of x_joint) and an
// independent product-of-marginals sample. Standard error of the difference
// of the two sample means.
Lemma1Result lemma1_check(const Eigen::MatrixXd& x_joint, const Eigen::VectorXd& z_joint,
                          const Eigen::VectorXd& pi_joint, const Eigen::MatrixXd& x_product,
                          const Eigen::VectorXd& z_product, const TestFn& h);

// Draws both sample sets with x ~ N(0, I_dim): the joint sample takes
// z ~ Bernoulli(pi(x)), the product sample z ~ Bernoulli(1/2).
Lemma1Result lemma1_sampled(const std::function<double(const Eigen::VectorXd&)>& pi, const TestFn& h,
                            std::size_t dim, std::size_t n, std::uint64_t seed);

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
KsResult ks_two_sample(std::vector<double> a, std::vector<double> b);

}  // namespace iwdd
