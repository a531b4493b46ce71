#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "iwdd/distill.hpp"
#include "iwdd/error.hpp"
#include "oracles.hpp"

using namespace iwdd;

namespace {

Conditioning random_cond(Eigen::Index d, Eigen::Index b, std::uint64_t seed) {
  Rng rng(seed);
  Conditioning c{Eigen::MatrixXd(d, b), Eigen::VectorXd(b)};
  for (Eigen::Index j = 0; j < b; ++j) {
    for (Eigen::Index i = 0; i < d; ++i) c.x(i, j) = rng.normal();
    c.z[j] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  }
  return c;
}

Eigen::VectorXd random_vec(Eigen::Index n, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Eigen::VectorXd v(n);
  for (auto& e : v) e = scale * rng.normal();
  return v;
}

// Denoiser with parameters nudged away from `base`, standing in for a fake
// network that has drifted during training.
Denoiser perturbed(const Denoiser& base, std::uint64_t seed, double scale) {
  Denoiser d = base;
  d.net.assign(base.net.flatten() + random_vec(static_cast<Eigen::Index>(base.net.parameter_count()), seed, scale));
  return d;
}

Dataset small_train(std::size_t n, std::uint64_t seed) {
  return standardize(generate_synthetic(n, Domain::Train, 0.1, seed)).first;
}

}  // namespace

TEST_SUITE("distill") {
  TEST_CASE("generator starts as the teacher's one-shot denoise") {
    const auto teacher = Denoiser::create(2, {16, 16}, NoiseSchedule{}, 3);
    const auto gen = make_generator(teacher);
    const auto cond = random_cond(2, 100, 1);
    const Eigen::VectorXd eps = random_vec(100, 2);
    const Eigen::VectorXd direct = denoise(teacher, 2.5 * eps, Eigen::VectorXd::Constant(100, 2.5), cond);
    CHECK(generator_forward(gen, cond, eps) == direct);
    CHECK(generator_forward(gen, cond, eps) == generator_forward(gen, cond, eps));
  }

  TEST_CASE("sigma_init must lie inside the schedule") {
    const auto teacher = Denoiser::create(1, {4}, NoiseSchedule{}, 3);
    CHECK_THROWS_AS(make_generator(teacher, 0.001), ConfigError);
    CHECK_THROWS_AS(make_generator(teacher, 80.0), ConfigError);
  }

  TEST_CASE("dy_g/dtheta matches central differences") {
    const auto gen = make_generator(Denoiser::create(2, {10, 10}, NoiseSchedule{}, 4));
    const auto cond = random_cond(2, 6, 3);
    const Eigen::VectorXd eps = random_vec(6, 4), c = random_vec(6, 5);
    DenoisePass pass;
    generator_forward(gen, cond, eps, &pass);
    const Eigen::VectorXd analytic = flatten(denoise_backward(gen.net, pass, c, true).params);
    OneStepGenerator probe = gen;
    const Eigen::VectorXd numeric = oracle::central_diff(
        [&](const Eigen::VectorXd& p) {
          probe.net.net.assign(p);
          return c.dot(generator_forward(probe, cond, eps));
        },
        gen.net.net.flatten());
    CHECK(oracle::max_rel_error(analytic, numeric) <= 1e-4);
  }

  TEST_CASE("randomization_adjust permutes x and draws balanced z") {
    Rng rng(8);
    const Eigen::MatrixXd x = random_cond(3, 40, 2).x;
    const auto adj = randomization_adjust(x, rng);
    // multiset of columns preserved
    std::vector<std::vector<double>> a, b;
    for (Eigen::Index j = 0; j < 40; ++j) {
      a.push_back({x(0, j), x(1, j), x(2, j)});
      b.push_back({adj.x(0, j), adj.x(1, j), adj.x(2, j)});
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);

    double total = 0.0;
    for (int k = 0; k < 10000; ++k) total += randomization_adjust(x.leftCols(1), rng).z.sum();
    CHECK(total / 10000.0 >= 0.49);
    CHECK(total / 10000.0 <= 0.51);

    const auto one = randomization_adjust(x.leftCols(1), rng);
    CHECK(one.x == x.leftCols(1));
    CHECK_THROWS_AS(randomization_adjust(Eigen::MatrixXd(3, 0), rng), DataError);
  }

  TEST_CASE("randomization_adjust is deterministic given the rng state") {
    const Eigen::MatrixXd x = random_cond(2, 25, 7).x;
    Rng r1(5), r2(5);
    const auto a = randomization_adjust(x, r1), b = randomization_adjust(x, r2);
    CHECK(a.x == b.x);
    CHECK(a.z == b.z);
  }

  TEST_CASE("time draws follow t ~ U[0, t_max / 1000]") {
    NoiseSchedule s;
    Rng rng(1);
    double sum = 0.0;
    for (int i = 0; i < 100000; ++i) {
      const auto td = time_and_noise(s, 1, rng);
      CHECK(td.t >= 0.0);
      CHECK(td.t <= 1.0);
      sum += td.t;
    }
    CHECK(std::abs(sum / 100000.0 / 0.5 - 1.0) <= 0.01);

    s.t_max = 400.0;
    sum = 0.0;
    for (int i = 0; i < 100000; ++i) sum += time_and_noise(s, 1, rng).t;
    CHECK(std::abs(sum / 100000.0 / 0.2 - 1.0) <= 0.01);

    s.t_max = 0.0;
    const auto td = time_and_noise(s, 3, rng);
    CHECK(td.t == 0.0);
    CHECK(td.sigma == 0.002);
    CHECK(td.eps_t.size() == 3);
  }

  TEST_CASE("loss weight w(t)") {
    const Eigen::VectorXd y = Eigen::Vector3d(1.0, 2.0, 3.0);
    const Eigen::VectorXd t = Eigen::Vector3d(3.0, 0.0, 5.0);  // |diff| = 2, 2, 2
    const auto w = weight_wt(y, t, 1.0);
    CHECK(w.value == 0.5);
    CHECK_FALSE(w.clamped);
    CHECK(weight_wt(y, y, 1.0).value == 1e8);
    CHECK(weight_wt(y, y, 1.0).clamped);
    const Eigen::VectorXd t2 = y + 2.0 * (t - y);
    CHECK(weight_wt(y, t2, 1.0).value == 0.25);
  }

  TEST_CASE("generator loss hand values") {
    const Eigen::VectorXd fake = Eigen::VectorXd::Constant(1, 2.0), teacher = Eigen::VectorXd::Constant(1, 1.0),
                          y_g = Eigen::VectorXd::Constant(1, 0.0);
    // (teacher - fake)(fake - y_g) = (1 - 2)(2 - 0)
    CHECK(generator_loss_terms(fake, teacher, y_g, 1.0, 1.0).loss == -2.0);
    // plus (1 - alpha) |teacher - fake|^2 = 0.5 * 1
    CHECK(generator_loss_terms(fake, teacher, y_g, 0.5, 1.0).loss == -1.5);
    // per-example weights scale the contribution
    const Eigen::VectorXd s = Eigen::VectorXd::Constant(1, 3.0);
    CHECK(generator_loss_terms(fake, teacher, y_g, 1.0, 1.0, &s).loss == -6.0);
    CHECK_THROWS_AS(generator_loss_terms(fake, teacher, Eigen::VectorXd::Zero(2), 1.0, 1.0), DataError);
  }

  TEST_CASE("generator loss partials match central differences") {
    const Eigen::VectorXd f = random_vec(7, 1), t = random_vec(7, 2), y = random_vec(7, 3);
    const auto terms = generator_loss_terms(f, t, y, 0.7, 1.3);
    auto at = [&](int which) {
      return [&, which](const Eigen::VectorXd& v) {
        return generator_loss_terms(which == 0 ? v : f, which == 1 ? v : t, which == 2 ? v : y, 0.7, 1.3).loss;
      };
    };
    CHECK(oracle::max_rel_error(terms.d_fake, oracle::central_diff(at(0), f)) <= 1e-6);
    CHECK(oracle::max_rel_error(terms.d_teacher, oracle::central_diff(at(1), t)) <= 1e-6);
    CHECK(oracle::max_rel_error(terms.d_y_g, oracle::central_diff(at(2), y)) <= 1e-6);
  }

  TEST_CASE("generator loss vanishes exactly when psi = phi") {
    const auto teacher = Denoiser::create(2, {12, 12}, NoiseSchedule{}, 5);
    const auto gen = make_generator(perturbed(teacher, 3, 0.05));
    Rng rng(4);
    for (double alpha : {0.3, 0.7, 1.0, 1.2}) {
      const auto cond = random_cond(2, 9, rng.index(1000));
      const auto td = time_and_noise(teacher.schedule, 9, rng);
      const auto step = generator_loss(gen, teacher, teacher, cond, random_vec(9, rng.index(1000)), td, alpha, 1.0);
      CHECK(step.loss == 0.0);
      CHECK(flatten(step.grads).cwiseAbs().maxCoeff() == 0.0);
    }
  }

  TEST_CASE("composed generator gradient matches central differences") {
    for (std::uint64_t k = 0; k < 5; ++k) {
      const auto teacher = Denoiser::create(2, {10, 10}, NoiseSchedule{}, 10 + k);
      const auto fake = perturbed(teacher, 20 + k, 0.05);
      const auto gen = make_generator(perturbed(teacher, 30 + k, 0.05));
      const auto cond = random_cond(2, 6, 40 + k);
      const Eigen::VectorXd eps = random_vec(6, 50 + k);
      Rng rng(60 + k);
      const auto td = time_and_noise(teacher.schedule, 6, rng);
      const auto step = generator_loss(gen, fake, teacher, cond, eps, td, 0.7, 1.0);
      OneStepGenerator probe = gen;
      // w(t) is a stop-gradient constant, so hold it at the base value.
      const Eigen::VectorXd numeric = oracle::central_diff(
          [&](const Eigen::VectorXd& p) {
            probe.net.net.assign(p);
            return generator_loss(probe, fake, teacher, cond, eps, td, 0.7, 1.0, nullptr, step.w.value).loss;
          },
          gen.net.net.flatten());
      CHECK(oracle::max_rel_error(flatten(step.grads), numeric, 1e-8) <= 1e-3);
    }
  }

  TEST_CASE("fake loss hand value and gradient") {
    CHECK(fake_loss_value(Eigen::VectorXd::Constant(1, 3.0), Eigen::VectorXd::Constant(1, 1.0), 0.5) == 2.0);
    CHECK(fake_loss_value(Eigen::Vector2d(1, 2), Eigen::Vector2d(1, 2), 0.5) == 0.0);
    CHECK_THROWS_AS(fake_loss_value(Eigen::Vector2d(1, 2), Eigen::VectorXd::Zero(3), 1.0), DataError);

    const auto teacher = Denoiser::create(2, {10, 10}, NoiseSchedule{}, 7);
    const auto fake = perturbed(teacher, 8, 0.05);
    const auto cond = random_cond(2, 5, 9);
    const Eigen::VectorXd y_g = random_vec(5, 10);
    Rng rng(11);
    const auto td = time_and_noise(teacher.schedule, 5, rng);
    const auto step = fake_loss(fake, teacher, y_g, td, cond, 1.0);
    CHECK(step.loss >= 0.0);
    Denoiser probe = fake;
    const Eigen::VectorXd numeric = oracle::central_diff(
        [&](const Eigen::VectorXd& p) {
          probe.net.assign(p);
          return fake_loss(probe, teacher, y_g, td, cond, 1.0, step.gamma.value).loss;
        },
        fake.net.flatten());
    CHECK(oracle::max_rel_error(flatten(step.grads), numeric, 1e-8) <= 1e-4);
  }

  TEST_CASE("importance weights") {
    CHECK(ipw_weight(0.5, 1) == 1.0);
    CHECK(ipw_weight(0.1, 1) == doctest::Approx(5.0).epsilon(1e-14));
    CHECK(ipw_weight(0.1, 0) == doctest::Approx(0.5 / 0.9).epsilon(1e-14));
    CHECK(ipw_weight(0.01, 1, 10.0) == 10.0);
    CHECK_THROWS_AS(ipw_weight(0.0, 1), DataError);
    CHECK_THROWS_AS(ipw_weight(1.0, 0), DataError);
    for (double logit : {-3.0, -0.2, 0.0, 1.7}) {
      const double pi = 1.0 / (1.0 + std::exp(-logit));
      for (int z : {0, 1}) CHECK(ipw_weight_from_logit(logit, z) == doctest::Approx(ipw_weight(pi, z)).epsilon(1e-12));
    }
    CHECK(std::isfinite(ipw_weight_from_logit(-800.0, 1)));
  }

  TEST_CASE("propensity fit is calibrated on the covariate-shift split") {
    const auto ds = small_train(2000, 3);
    PropensityConfig cfg;
    cfg.hidden.clear();
    cfg.steps = 2000;
    const auto model = propensity_fit(ds, cfg);
    const Eigen::VectorXd pi = model.predict(ds.covariates.transpose());
    CHECK(pi.minCoeff() > 0.0);
    CHECK(pi.maxCoeff() < 1.0);
    // Factual pairs sit on the right side of the x = -1 threshold, so their
    // weights stay near 1/2; the opposite arm is where the tail lives.
    double max_factual = 0.0, max_flipped = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const double p = pi[static_cast<Eigen::Index>(i)];
      max_factual = std::max(max_factual, ipw_weight(p, ds.treatments[i]));
      max_flipped = std::max(max_flipped, ipw_weight(p, 1 - ds.treatments[i]));
    }
    CHECK(max_factual < 5.0);
    CHECK(max_flipped > 5.0);
    CHECK(std::abs(pi.mean() - treated_fraction(ds)) < 0.02);
  }

  TEST_CASE("zero iterations return the teacher-initialised generator") {
    const auto ds = small_train(300, 1);
    const auto teacher = Denoiser::create(1, {8, 8}, NoiseSchedule{}, 2);
    DistillConfig cfg;
    cfg.iterations = 0;
    const auto res = distill(teacher, ds, cfg);
    CHECK(res.generator.net.net.flatten() == teacher.net.flatten());
    CHECK(res.fake.net.flatten() == teacher.net.flatten());
    CHECK(res.completed_iterations == 0);
  }

  TEST_CASE("distillation is deterministic for a seed") {
    const auto ds = small_train(300, 1);
    const auto teacher = Denoiser::create(1, {8, 8}, NoiseSchedule{}, 2);
    DistillConfig cfg;
    cfg.iterations = 30;
    cfg.batch = 32;
    cfg.seed = 9;
    const auto a = distill(teacher, ds, cfg), b = distill(teacher, ds, cfg);
    CHECK(a.generator.net.net.flatten() == b.generator.net.net.flatten());
    CHECK(a.fake.net.flatten() == b.fake.net.flatten());
  }

  TEST_CASE("ipw with pi = 1/2 retraces the unweighted joint run") {
    const auto ds = small_train(300, 2);
    const auto teacher = Denoiser::create(1, {8, 8}, NoiseSchedule{}, 3);
    PropensityModel half{Mlp({1, 1})};  // zero logit everywhere
    DistillConfig cfg;
    cfg.iterations = 25;
    cfg.batch = 32;
    cfg.seed = 4;
    cfg.mode = DistillMode::ExplicitIpw;
    const auto ipw = distill_ipw(teacher, ds, half, cfg);
    cfg.mode = DistillMode::Joint;
    const auto joint = distill(teacher, ds, cfg);
    CHECK(ipw.generator.net.net.flatten() == joint.generator.net.net.flatten());
    CHECK(ipw.max_example_weight == 1.0);
  }

  TEST_CASE("config validation") {
    DistillConfig cfg;
    CHECK_FALSE(cfg.validate().has_value());
    cfg.alpha = 2.0;
    CHECK(cfg.validate().has_value());
    cfg.alpha = 0.7;
    cfg.batch = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.batch = 8;
    cfg.mode = DistillMode::ExplicitIpw;
    CHECK_THROWS_AS(distill(Denoiser::create(1, {4}, NoiseSchedule{}, 1), small_train(50, 1), cfg), ConfigError);
  }

  TEST_CASE("generator loss trace stays finite over 10k steps" * doctest::timeout(900)) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto ds = small_train(2000, 20 + seed);
      PretrainConfig pc;
      pc.steps = 2000;
      pc.log_every = 0;
      pc.seed = seed;
      const auto teacher = pretrain(Denoiser::create(1, {32, 32}, NoiseSchedule{}, seed), ds, pc).denoiser;
      DistillConfig cfg;
      cfg.iterations = 10000;
      cfg.batch = 64;
      cfg.log_every = 100;
      cfg.seed = seed;
      const auto res = distill(teacher, ds, cfg);
      CHECK_FALSE(res.failure.has_value());
      CHECK(res.completed_iterations == 10000);
      for (const auto& row : res.log) {
        CHECK(std::isfinite(row.loss_theta));
        CHECK(std::isfinite(row.loss_psi));
      }
    }
  }
}
