#include <doctest.h>

#include <cmath>

#include "iwdd/analysis.hpp"
#include "iwdd/error.hpp"
#include "oracles.hpp"

using namespace iwdd;

namespace {

// Returns the noiseless structural value for each column, ignoring the noise.
Eigen::VectorXd structural(const Conditioning& cond, const Eigen::VectorXd&) {
  Eigen::VectorXd out(cond.batch());
  for (Eigen::Index j = 0; j < cond.batch(); ++j) {
    const double x = cond.x(0, j);
    out[j] = std::sin(2.0 * x) + cond.z[j] * std::exp(x);
  }
  return out;
}

// Structural value plus unit noise, so row means carry Monte Carlo error.
Eigen::VectorXd noisy(const Conditioning& cond, const Eigen::VectorXd& noise) { return structural(cond, noise) + noise; }

StandardizationStats identity_stats(Eigen::Index d) {
  return {Eigen::VectorXd::Zero(d), Eigen::VectorXd::Ones(d), 0.0, 1.0};
}

}  // namespace

TEST_SUITE("analysis") {
  TEST_CASE("rmse hand values") {
    CHECK(rmse(Eigen::Vector2d(1, 2), Eigen::Vector2d(0, 0)) == doctest::Approx(std::sqrt(2.5)).epsilon(1e-12));
    CHECK(std::abs(rmse(Eigen::Vector2d(1, 2), Eigen::Vector2d(0, 0)) - 1.5811388300841898) <= 1e-12);
    CHECK(rmse(Eigen::Vector3d(1, 2, 3), Eigen::Vector3d(1, 2, 3)) == 0.0);
    CHECK(rmse(Eigen::Vector3d(3, 1, 2), Eigen::Vector3d(0, 4, 1)) == rmse(Eigen::Vector3d(1, 2, 3), Eigen::Vector3d(4, 1, 0)));
    CHECK_THROWS(rmse(Eigen::Vector2d(1, 2), Eigen::Vector3d(1, 2, 3)));
    CHECK_THROWS(rmse(Eigen::VectorXd(0), Eigen::VectorXd(0)));
  }

  TEST_CASE("pehe hand values") {
    const Eigen::VectorXd tau = Eigen::Vector4d(0.5, -1.0, 2.0, 0.0);
    CHECK(pehe(tau, tau) == 0.0);
    CHECK(std::abs(pehe(tau.array() + 1.0, tau) - 1.0) <= 1e-12);
    const Eigen::VectorXd hat = Eigen::Vector4d(1.0, 0.0, 1.0, 2.0);
    CHECK(std::abs(pehe(-3.0 * hat, -3.0 * tau) - 3.0 * pehe(hat, tau)) <= 1e-12);
    CHECK_THROWS(pehe(tau, Eigen::Vector2d(1, 2)));
  }

  TEST_CASE("win rates and the tie rule") {
    Eigen::MatrixXd strict(2, 3);
    strict << 1, 1, 3,
              2, 2, 1;
    const auto a = win_rates(strict);
    CHECK(std::abs(a[0] - 200.0 / 3.0) <= 1e-12);
    CHECK(std::abs(a[1] - 100.0 / 3.0) <= 1e-12);

    Eigen::MatrixXd tie(2, 2);
    tie << 1, 1,
           1, 2;
    const auto t = win_rates(tie);
    CHECK(t[0] == 100.0);
    CHECK(t[1] == 50.0);

    // three-way tie everywhere credits every method
    const auto all = win_rates(Eigen::MatrixXd::Constant(3, 4, 0.7));
    for (double w : all) CHECK(w == 100.0);

    CHECK(win_rates(Eigen::MatrixXd::Constant(1, 5, 2.0))[0] == 100.0);
    const auto hi = win_rates(strict, false);
    CHECK(std::abs(hi[0] - 100.0 / 3.0) <= 1e-12);
    CHECK(std::abs(hi[1] - 200.0 / 3.0) <= 1e-12);
    CHECK_THROWS_AS(win_rates(Eigen::MatrixXd(0, 0)), EvaluationError);
  }

  TEST_CASE("delta_pi values and symmetry") {
    CHECK(delta_pi(0.5) == 0.0);
    CHECK(std::abs(delta_pi(0.25) - 1.0 / 3.0) <= 1e-12);
    CHECK(std::abs(delta_pi(0.1) - (1.0 / 0.36 - 1.0)) <= 1e-12);
    Rng rng(2);
    for (int i = 0; i < 200; ++i) {
      const double p = rng.uniform(0.001, 0.999);
      CHECK(std::abs(delta_pi(p) - delta_pi(1.0 - p)) <= 1e-9 * (1.0 + delta_pi(p)));
      if (p != 0.5) CHECK(delta_pi(p) > 0.0);
    }
    CHECK_THROWS_AS(delta_pi(0.0), DataError);
    CHECK_THROWS_AS(delta_pi(1.0), DataError);
  }

  TEST_CASE("lemma 1 exact on a two-point joint") {
    const DiscreteJoint joint{{0.5, 0.5}, {0.2, 0.8}};
    const auto r = lemma1_check(joint, [](std::size_t, int z) { return double(z); });
    CHECK(std::abs(r.lhs - 0.5) <= 1e-12);
    CHECK(std::abs(r.rhs - 0.5) <= 1e-12);
    const auto one = lemma1_check(joint, [](std::size_t, int) { return 1.0; });
    CHECK(std::abs(one.lhs - 1.0) <= 1e-12);
    CHECK(std::abs(one.rhs - 1.0) <= 1e-12);
  }

  TEST_CASE("lemma 1 exact on random joints") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t k = 2 + rng.index(9);
      DiscreteJoint joint;
      double total = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        joint.p_x.push_back(rng.uniform(0.05, 1.0));
        joint.propensity.push_back(rng.uniform(0.02, 0.98));
        total += joint.p_x.back();
      }
      for (auto& p : joint.p_x) p /= total;
      std::vector<double> table(2 * k);
      for (auto& v : table) v = rng.uniform(-3.0, 3.0);
      const auto r = lemma1_check(joint, [&](std::size_t x, int z) { return table[2 * x + z]; });
      CHECK(std::abs(r.gap) <= 1e-12);
    }
  }

  TEST_CASE("lemma 1 rejects overlap violations") {
    CHECK_THROWS_AS(lemma1_check(DiscreteJoint{{0.5, 0.5}, {0.0, 0.5}}, [](std::size_t, int) { return 1.0; }),
                    DataError);
    CHECK_THROWS_AS(lemma1_check(DiscreteJoint{{1.0}, {1.0}}, [](std::size_t, int) { return 1.0; }), DataError);
  }

  TEST_CASE("lemma 1 sampled within three standard errors") {
    auto pi = [](const Eigen::VectorXd& x) { return oracle::logistic(-1.5 * x[0] - 1.0); };
    auto h = [](const Eigen::VectorXd& x, int z) { return std::sin(2.0 * x[0]) + z * std::tanh(x[0]) + 0.5 * z; };
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto r = lemma1_sampled(pi, h, 1, 100000, seed);
      CHECK(r.std_error > 0.0);
      CHECK(std::abs(r.gap) <= 3.0 * r.std_error);
    }
  }

  TEST_CASE("two-sample KS") {
    Rng rng(4);
    std::vector<double> a(2000), b(2000), c(2000);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    for (auto& v : c) v = rng.normal() + 0.3;
    CHECK(ks_two_sample(a, b).p_value > 0.01);
    CHECK(ks_two_sample(a, c).p_value < 1e-6);
    CHECK(ks_two_sample({1.0, 2.0}, {1.0, 2.0}).statistic == 0.0);
    CHECK(ks_two_sample({0.0}, {1.0}).statistic == 1.0);
    CHECK_THROWS_AS(ks_two_sample({}, {1.0}), DataError);
  }

  TEST_CASE("predict_po with a structural sampler") {
    const auto ds = generate_synthetic(40, Domain::Test, 0.1, 3);
    const auto po = predict_po(structural, ds, 3, 1);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const double x = ds.covariates(static_cast<Eigen::Index>(i), 0);
      CHECK(po.y0[static_cast<Eigen::Index>(i)] == doctest::Approx(std::sin(2.0 * x)).epsilon(1e-14));
      CHECK(po.y1[static_cast<Eigen::Index>(i)] == doctest::Approx(std::sin(2.0 * x) + std::exp(x)).epsilon(1e-14));
    }
    CHECK(po.se0.cwiseAbs().maxCoeff() <= 1e-12);
  }

  TEST_CASE("predict_po standard error shrinks like 1 / sqrt(m)") {
    const auto ds = generate_synthetic(200, Domain::Test, 0.1, 5);
    const auto small = predict_po(noisy, ds, 25, 2), big = predict_po(noisy, ds, 400, 2);
    const double ratio = small.se0.mean() / big.se0.mean();
    CHECK(ratio == doctest::Approx(4.0).epsilon(0.1));
    CHECK(small.se0.mean() == doctest::Approx(1.0 / 5.0).epsilon(0.05));
  }

  TEST_CASE("predict_po parallel matches serial bitwise") {
    const auto ds = generate_synthetic(300, Domain::Test, 0.1, 6);
    const auto a = predict_po(noisy, ds, 7, 9), b = predict_po_serial(noisy, ds, 7, 9);
    CHECK(a.y0 == b.y0);
    CHECK(a.y1 == b.y1);
    CHECK(a.se1 == b.se1);
    CHECK(predict_po(noisy, ds, 1, 3).y0 == predict_po(noisy, ds, 1, 3).y0);
  }

  TEST_CASE("evaluate scores an exact sampler at zero") {
    const auto train = generate_synthetic(300, Domain::Train, 0.0, 1);
    const auto test = generate_synthetic(300, Domain::Test, 0.0, 2);
    const auto out = evaluate(structural, train, test, identity_stats(1), 2, 3);
    CHECK(out.metrics.rmse_y0_in <= 1e-12);
    CHECK(out.metrics.rmse_y1_in <= 1e-12);
    CHECK(out.metrics.rmse_y0_out <= 1e-12);
    CHECK(out.metrics.rmse_y1_out <= 1e-12);
    CHECK(out.metrics.pehe_in <= 1e-12);
    CHECK(out.metrics.pehe_out <= 1e-12);
    CHECK(out.metrics.n_eval_samples_per_unit == 2);
  }

  TEST_CASE("evaluate uses factual rows for RMSE and all rows for PEHE") {
    const auto train = generate_synthetic(200, Domain::Test, 0.0, 7);
    const auto test = generate_synthetic(200, Domain::Test, 0.0, 8);
    // y0 off by one everywhere, y1 exact: RMSE(Y0) = 1, RMSE(Y1) = 0, PEHE = 1
    ConditionalSampler shifted = [](const Conditioning& c, const Eigen::VectorXd& n) {
      return (structural(c, n).array() + (1.0 - c.z.array())).matrix();
    };
    const auto m = evaluate(shifted, train, test, identity_stats(1), 1, 1).metrics;
    CHECK(std::abs(m.rmse_y0_out - 1.0) <= 1e-12);
    CHECK(m.rmse_y1_out <= 1e-12);
    CHECK(std::abs(m.pehe_out - 1.0) <= 1e-12);
  }

  TEST_CASE("evaluate fails on a split without treated rows") {
    auto test = generate_synthetic(50, Domain::Test, 0.0, 8);
    std::fill(test.treatments.begin(), test.treatments.end(), std::uint8_t{0});
    const auto train = generate_synthetic(50, Domain::Test, 0.0, 7);
    CHECK_THROWS_AS(evaluate(structural, train, test, identity_stats(1), 1, 1), EvaluationError);
  }
}
