#include "iwdd/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <exception>

#include "iwdd/error.hpp"
#include "iwdd/rng.hpp"

namespace iwdd {

ConditionalSampler generator_sampler(const OneStepGenerator& gen) {
  return [&gen](const Conditioning& cond, const Eigen::VectorXd& noise) {
    return generator_forward(gen, cond, noise);
  };
}

ConditionalSampler teacher_sampler(const Denoiser& teacher, std::size_t steps) {
  return [&teacher, steps](const Conditioning& cond, const Eigen::VectorXd& noise) {
    return sample_reverse(teacher, cond, steps, noise);
  };
}

namespace {

void predict_row(const ConditionalSampler& sampler, const Dataset& ds, std::size_t row, std::size_t m,
                 std::uint64_t seed, PoPredictions& out) {
  const auto copies = static_cast<Eigen::Index>(m);
  const auto r = static_cast<Eigen::Index>(row);
  for (std::uint8_t arm = 0; arm < 2; ++arm) {
    Rng rng(seed, row, arm);
    Eigen::VectorXd noise(copies);
    for (Eigen::Index i = 0; i < copies; ++i) noise[i] = rng.normal();
    const Eigen::VectorXd draws = sampler(conditioning_for_row(ds, row, arm, copies), noise);
    const double mean = draws.mean();
    const double se =
        m > 1 ? std::sqrt((draws.array() - mean).square().sum() / static_cast<double>(m - 1) / static_cast<double>(m))
              : 0.0;
    (arm == 0 ? out.y0 : out.y1)[r] = mean;
    (arm == 0 ? out.se0 : out.se1)[r] = se;
  }
}

PoPredictions allocate(std::size_t n) {
  const auto rows = static_cast<Eigen::Index>(n);
  return {Eigen::VectorXd(rows), Eigen::VectorXd(rows), Eigen::VectorXd(rows), Eigen::VectorXd(rows)};
}

void finish(PoPredictions& p, const StandardizationStats* stats) {
  if (!stats) return;
  p.y0 = destandardize_y(p.y0, *stats);
  p.y1 = destandardize_y(p.y1, *stats);
  p.se0 *= stats->std_y;
  p.se1 *= stats->std_y;
}

}  // namespace

PoPredictions predict_po(const ConditionalSampler& sampler, const Dataset& ds, std::size_t m, std::uint64_t seed,
                         const StandardizationStats* stats) {
  if (m == 0) throw EvaluationError("predict_po: m_samples must be >= 1");
  auto out = allocate(ds.size());
  const auto n = static_cast<std::int64_t>(ds.size());
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 8)
  for (std::int64_t row = 0; row < n; ++row) {
    try {
      predict_row(sampler, ds, static_cast<std::size_t>(row), m, seed, out);
    } catch (...) {
#pragma omp critical
      error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  finish(out, stats);
  return out;
}

PoPredictions predict_po_serial(const ConditionalSampler& sampler, const Dataset& ds, std::size_t m,
                                std::uint64_t seed, const StandardizationStats* stats) {
  if (m == 0) throw EvaluationError("predict_po: m_samples must be >= 1");
  auto out = allocate(ds.size());
  for (std::size_t row = 0; row < ds.size(); ++row) predict_row(sampler, ds, row, m, seed, out);
  finish(out, stats);
  return out;
}

double rmse(const Eigen::VectorXd& predicted, const Eigen::VectorXd& actual) {
  if (predicted.size() != actual.size()) throw EvaluationError("rmse: length mismatch");
  if (predicted.size() == 0) throw EvaluationError("rmse: empty input");
  return std::sqrt((predicted - actual).squaredNorm() / static_cast<double>(predicted.size()));
}

double pehe(const Eigen::VectorXd& tau_hat, const Eigen::VectorXd& tau) {
  if (tau_hat.size() != tau.size()) throw EvaluationError("pehe: length mismatch");
  return rmse(tau_hat, tau);
}

std::vector<double> win_rates(const Eigen::MatrixXd& scores, bool lower_is_better) {
  if (scores.rows() == 0 || scores.cols() == 0) throw EvaluationError("win_rates: empty score matrix");
  std::vector<double> wins(static_cast<std::size_t>(scores.rows()), 0.0);
  for (Eigen::Index d = 0; d < scores.cols(); ++d) {
    const double best = lower_is_better ? scores.col(d).minCoeff() : scores.col(d).maxCoeff();
    for (Eigen::Index m = 0; m < scores.rows(); ++m)
      if (scores(m, d) == best) wins[static_cast<std::size_t>(m)] += 1.0;
  }
  for (auto& w : wins) w = 100.0 * w / static_cast<double>(scores.cols());
  return wins;
}

namespace {

struct FactualSplit {
  Eigen::VectorXd predicted, actual;
};

FactualSplit factual_rows(const Eigen::VectorXd& predicted, const Eigen::VectorXd& truth, const Dataset& ds,
                          std::uint8_t arm) {
  std::vector<Eigen::Index> idx;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.treatments[i] == arm) idx.push_back(static_cast<Eigen::Index>(i));
  if (idx.empty())
    throw EvaluationError("evaluate: split has no rows with z = " + std::to_string(int(arm)));
  FactualSplit s{Eigen::VectorXd(static_cast<Eigen::Index>(idx.size())),
                 Eigen::VectorXd(static_cast<Eigen::Index>(idx.size()))};
  for (std::size_t k = 0; k < idx.size(); ++k) {
    s.predicted[static_cast<Eigen::Index>(k)] = predicted[idx[k]];
    s.actual[static_cast<Eigen::Index>(k)] = truth[idx[k]];
  }
  return s;
}

}  // namespace

EvaluationOutput evaluate(const ConditionalSampler& sampler, const Dataset& train, const Dataset& test,
                          const StandardizationStats& stats, std::size_t m, std::uint64_t seed) {
  if (!train.has_potential_outcomes() || !test.has_potential_outcomes())
    throw EvaluationError("evaluate: oracle potential outcomes are required");
  EvaluationOutput out;
  out.train = predict_po(sampler, apply_standardization(train, stats), m, seed, &stats);
  out.test = predict_po(sampler, apply_standardization(test, stats), m, seed + 1, &stats);
  auto arm_rmse = [](const PoPredictions& p, const Dataset& ds, std::uint8_t arm) {
    const auto s = factual_rows(arm == 0 ? p.y0 : p.y1, arm == 0 ? *ds.true_y0 : *ds.true_y1, ds, arm);
    return rmse(s.predicted, s.actual);
  };
  auto& r = out.metrics;
  r.rmse_y0_in = arm_rmse(out.train, train, 0);
  r.rmse_y1_in = arm_rmse(out.train, train, 1);
  r.rmse_y0_out = arm_rmse(out.test, test, 0);
  r.rmse_y1_out = arm_rmse(out.test, test, 1);
  r.pehe_in = pehe(out.train.y1 - out.train.y0, *train.true_y1 - *train.true_y0);
  r.pehe_out = pehe(out.test.y1 - out.test.y0, *test.true_y1 - *test.true_y0);
  r.n_eval_samples_per_unit = m;
  return out;
}

double delta_pi(double pi) {
  if (!(pi > 0.0 && pi < 1.0)) throw DataError("delta_pi: propensity must lie in (0, 1)");
  return 1.0 / (4.0 * pi * (1.0 - pi)) - 1.0;
}

Lemma1Result lemma1_check(const DiscreteJoint& joint, const DiscreteTestFn& h) {
  if (joint.p_x.size() != joint.propensity.size() || joint.p_x.empty())
    throw DataError("lemma1_check: p(x) and pi(x) must have equal, non-zero length");
  Lemma1Result r;
  for (std::size_t x = 0; x < joint.p_x.size(); ++x) {
    const double pi = joint.propensity[x];
    if (!(pi > 0.0 && pi < 1.0))
      throw DataError("lemma1_check: overlap violated, pi(" + std::to_string(x) + ") = " + std::to_string(pi));
    for (int z = 0; z < 2; ++z) {
      const double p_z = z == 1 ? pi : 1.0 - pi;
      r.lhs += joint.p_x[x] * p_z * ipw_weight(pi, z) * h(x, z);
      r.rhs += joint.p_x[x] * 0.5 * h(x, z);
    }
  }
  r.gap = r.lhs - r.rhs;
  return r;
}

Lemma1Result lemma1_check(const Eigen::MatrixXd& x_joint, const Eigen::VectorXd& z_joint,
                          const Eigen::VectorXd& pi_joint, const Eigen::MatrixXd& x_product,
                          const Eigen::VectorXd& z_product, const TestFn& h) {
  const auto n = z_joint.size();
  const auto m = z_product.size();
  if (n < 2 || m < 2 || x_joint.cols() != n || pi_joint.size() != n || x_product.cols() != m)
    throw DataError("lemma1_check: sample sets are empty or inconsistent");
  Eigen::VectorXd a(n), b(m);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(pi_joint[i] > 0.0 && pi_joint[i] < 1.0))
      throw DataError("lemma1_check: overlap violated at joint sample " + std::to_string(i));
    const int z = static_cast<int>(z_joint[i]);
    a[i] = ipw_weight(pi_joint[i], z) * h(x_joint.col(i), z);
  }
  for (Eigen::Index j = 0; j < m; ++j) b[j] = h(x_product.col(j), static_cast<int>(z_product[j]));
  Lemma1Result r;
  r.lhs = a.mean();
  r.rhs = b.mean();
  r.gap = r.lhs - r.rhs;
  const double var_a = (a.array() - r.lhs).square().sum() / static_cast<double>(n - 1);
  const double var_b = (b.array() - r.rhs).square().sum() / static_cast<double>(m - 1);
  r.std_error = std::sqrt(var_a / static_cast<double>(n) + var_b / static_cast<double>(m));
  return r;
}

Lemma1Result lemma1_sampled(const std::function<double(const Eigen::VectorXd&)>& pi, const TestFn& h,
                            std::size_t dim, std::size_t n, std::uint64_t seed) {
  if (dim == 0) throw DataError("lemma1_sampled: dimension must be >= 1");
  const auto rows = static_cast<Eigen::Index>(dim);
  const auto cols = static_cast<Eigen::Index>(n);
  Rng joint(seed, 0), product(seed, 1);
  Eigen::MatrixXd xj(rows, cols), xp(rows, cols);
  Eigen::VectorXd zj(cols), zp(cols), pj(cols);
  for (Eigen::Index i = 0; i < cols; ++i) {
    for (Eigen::Index k = 0; k < rows; ++k) xj(k, i) = joint.normal();
    pj[i] = pi(xj.col(i));
    zj[i] = joint.uniform() < pj[i] ? 1.0 : 0.0;
    for (Eigen::Index k = 0; k < rows; ++k) xp(k, i) = product.normal();
    zp[i] = product.bernoulli(0.5) ? 1.0 : 0.0;
  }
  return lemma1_check(xj, zj, pj, xp, zp, h);
}

KsResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw DataError("ks_two_sample: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == v) ++i;
    while (j < b.size() && b[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  const double ne = std::sqrt(na * nb / (na + nb));
  const double lambda = (ne + 0.12 + 0.11 / ne) * d;
  double p = 0.0;
  if (lambda < 1e-3) {
    p = 1.0;
  } else {
    double sign = 1.0;
    for (int k = 1; k <= 100; ++k) {
      const double term = sign * std::exp(-2.0 * k * k * lambda * lambda);
      p += term;
      if (std::abs(term) < 1e-12) break;
      sign = -sign;
    }
    p = std::clamp(2.0 * p, 0.0, 1.0);
  }
  return {d, p};
}

}  // namespace iwdd
