#include <doctest.h>

#include <cmath>
#include <sstream>

#include "iwdd/error.hpp"
#include "iwdd/grad_check.hpp"
#include "iwdd/mlp.hpp"
#include "iwdd/rng.hpp"
#include "oracles.hpp"

using namespace iwdd;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.normal();
  return m;
}

// 0.5 * sum (f(x) - y)^2 over the batch
std::pair<double, LayerGrads> squared_loss(const Mlp& net, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  MlpCache cache;
  const Eigen::MatrixXd out = mlp_forward(net, x, &cache);
  const Eigen::MatrixXd r = out - y;
  return {0.5 * r.squaredNorm(), mlp_backward(net, cache, r).grads};
}

}  // namespace

TEST_SUITE("mlp") {
  TEST_CASE("zero-weight net returns the last bias") {
    Mlp net({3, 4, 2});
    auto& layers = net.mutable_layers();
    layers.back().bias << 0.25, -1.5;
    const Eigen::MatrixXd out = mlp_forward(net, random_matrix(3, 5, 1));
    for (Eigen::Index j = 0; j < 5; ++j) {
      CHECK(out(0, j) == 0.25);
      CHECK(out(1, j) == -1.5);
    }
  }

  TEST_CASE("forward is deterministic") {
    const auto net = Mlp::uniform_init({2, 8, 8, 1}, 99);
    const auto x = random_matrix(2, 7, 3);
    const Eigen::MatrixXd a = mlp_forward(net, x), b = mlp_forward(net, x);
    CHECK(a == b);
    const auto net2 = Mlp::uniform_init({2, 8, 8, 1}, 99);
    CHECK(net.flatten() == net2.flatten());
  }

  TEST_CASE("single linear layer matches a hand product") {
    Mlp net({2, 2});
    auto& l = net.mutable_layers()[0];
    l.weight << 1.0, 2.0, 3.0, 4.0;
    l.bias << 0.5, -0.5;
    const Eigen::MatrixXd out = mlp_forward(net, Eigen::Vector2d(1.0, -1.0));
    CHECK(out(0, 0) == -0.5);  // 1 - 2 + 0.5
    CHECK(out(1, 0) == -1.5);  // 3 - 4 - 0.5
  }

  TEST_CASE("forward rejects a wrong input width") {
    const auto net = Mlp::uniform_init({3, 4, 1}, 1);
    CHECK_THROWS_AS(mlp_forward(net, Eigen::MatrixXd::Zero(2, 1)), DataError);
  }

  TEST_CASE("linear net squared loss gradient equals 2(Wv+b-y)v^T") {
    Mlp net({2, 1});
    auto& l = net.mutable_layers()[0];
    l.weight << 0.3, -0.7;
    l.bias << 0.1;
    const Eigen::Vector2d v(2.0, 1.0);
    const double y = 0.4;
    MlpCache cache;
    const double out = mlp_forward(net, v, &cache)(0, 0);
    // loss = (out - y)^2
    const auto g = mlp_backward(net, cache, Eigen::MatrixXd::Constant(1, 1, 2.0 * (out - y))).grads;
    const double r = 0.3 * 2.0 - 0.7 * 1.0 + 0.1 - y;
    CHECK(g[0].weight(0, 0) == doctest::Approx(2 * r * 2.0).epsilon(1e-14));
    CHECK(g[0].weight(0, 1) == doctest::Approx(2 * r * 1.0).epsilon(1e-14));
    CHECK(g[0].bias(0) == doctest::Approx(2 * r).epsilon(1e-14));
  }

  TEST_CASE("parameter and input gradients match central differences") {
    for (const auto act : {Activation::SiLU, Activation::Tanh}) {
      const auto net = Mlp::uniform_init({3, 10, 10, 2}, 5, act);
      const auto x = random_matrix(3, 4, 6);
      const auto y = random_matrix(2, 4, 7);
      const Eigen::VectorXd analytic = flatten(squared_loss(net, x, y).second);
      Mlp probe = net;
      const Eigen::VectorXd numeric = oracle::central_diff(
          [&](const Eigen::VectorXd& p) {
            probe.assign(p);
            return squared_loss(probe, x, y).first;
          },
          net.flatten());
      CHECK(oracle::max_rel_error(analytic, numeric) <= 1e-4);

      MlpCache cache;
      const Eigen::MatrixXd out = mlp_forward(net, x, &cache);
      const Eigen::MatrixXd input_grad = mlp_backward(net, cache, out - y).input_grad;
      Eigen::VectorXd xflat = Eigen::Map<const Eigen::VectorXd>(x.data(), x.size());
      const Eigen::VectorXd num_in = oracle::central_diff(
          [&](const Eigen::VectorXd& p) {
            const Eigen::MatrixXd xm = Eigen::Map<const Eigen::MatrixXd>(p.data(), 3, 4);
            return 0.5 * (mlp_forward(net, xm) - y).squaredNorm();
          },
          xflat);
      CHECK(oracle::max_rel_error(Eigen::Map<const Eigen::VectorXd>(input_grad.data(), input_grad.size()), num_in) <=
            1e-4);
    }
  }

  TEST_CASE("zero output gradient gives zero parameter gradients") {
    const auto net = Mlp::uniform_init({2, 5, 1}, 2);
    MlpCache cache;
    mlp_forward(net, random_matrix(2, 3, 1), &cache);
    CHECK(flatten(mlp_backward(net, cache, Eigen::MatrixXd::Zero(1, 3)).grads).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("backward rejects a stale cache") {
    auto net = Mlp::uniform_init({2, 5, 1}, 2);
    MlpCache cache;
    mlp_forward(net, random_matrix(2, 3, 1), &cache);
    net.mutable_layers()[0].bias[0] += 1.0;
    CHECK_THROWS_AS(mlp_backward(net, cache, Eigen::MatrixXd::Ones(1, 3)), DataError);
  }

  TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    auto net = Mlp::uniform_init({2, 3, 1}, 4);
    const auto before = net.flatten();
    auto state = make_adam(net, 1e-2);
    adam_step(net, zeros_like(net), state);
    CHECK(net.flatten() == before);
    CHECK(state.step == 1);
  }

  TEST_CASE("adam: one step on a scalar matches the hand update") {
    Mlp net({1, 1});
    net.mutable_layers()[0].weight(0, 0) = 1.0;
    auto state = make_adam(net, 0.1);
    LayerGrads g = zeros_like(net);
    g[0].weight(0, 0) = 3.0;
    adam_step(net, g, state);
    // m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
    const double expected = 1.0 - 0.1 * 3.0 / (3.0 + 1e-8);
    CHECK(net.layers()[0].weight(0, 0) == doctest::Approx(expected).epsilon(1e-15));
    CHECK(net.layers()[0].bias(0) == 0.0);
  }

  TEST_CASE("adam: identical nets and gradients update identically") {
    auto a = Mlp::uniform_init({3, 4, 1}, 8), b = Mlp::uniform_init({3, 4, 1}, 8);
    auto sa = make_adam(a, 1e-3), sb = make_adam(b, 1e-3);
    const auto x = random_matrix(3, 6, 2), y = random_matrix(1, 6, 3);
    for (int i = 0; i < 5; ++i) {
      adam_step(a, squared_loss(a, x, y).second, sa);
      adam_step(b, squared_loss(b, x, y).second, sb);
    }
    CHECK(a.flatten() == b.flatten());
  }

  TEST_CASE("adam: lr = 0 is the identity") {
    auto net = Mlp::uniform_init({3, 4, 1}, 8);
    const auto before = net.flatten();
    auto s = make_adam(net, 0.0);
    adam_step(net, squared_loss(net, random_matrix(3, 2, 1), random_matrix(1, 2, 2)).second, s);
    CHECK(net.flatten() == before);
  }

  TEST_CASE("adam: non-finite gradient is a named error and changes nothing") {
    auto net = Mlp::uniform_init({2, 2, 1}, 1);
    const auto before = net.flatten();
    auto s = make_adam(net, 1e-3);
    auto g = zeros_like(net);
    g[1].bias[0] = std::nan("");
    CHECK_THROWS_AS(adam_step(net, g, s), TrainingError);
    CHECK(net.flatten() == before);
  }

  TEST_CASE("adam: shape mismatch is rejected") {
    auto net = Mlp::uniform_init({2, 2, 1}, 1);
    auto s = make_adam(net, 1e-3);
    CHECK_THROWS_AS(adam_step(net, zeros_like(Mlp::uniform_init({2, 3, 1}, 1)), s), DataError);
  }

  TEST_CASE("grad_check passes on a random 8-16-16-1 net") {
    const auto net = Mlp::uniform_init({8, 16, 16, 1}, 12);
    const auto x = random_matrix(8, 5, 1), y = random_matrix(1, 5, 2);
    const auto report = grad_check(net, [&](const Mlp& m) { return squared_loss(m, x, y); }, 1e-4);
    CHECK(report.passed);
    CHECK(report.max_rel_error <= 1e-4);
    CHECK(report.checked == net.parameter_count());
  }

  TEST_CASE("grad_check is exact on a single bias") {
    Mlp net({1, 1});  // weight fixed at zero, so the loss is (b - 2)^2
    const auto report = grad_check(
        net,
        [](const Mlp& m) {
          const double b = m.layers()[0].bias[0], w = m.layers()[0].weight(0, 0);
          LayerGrads g = zeros_like(m);
          g[0].bias[0] = 2.0 * (b + w - 2.0);
          g[0].weight(0, 0) = 2.0 * (b + w - 2.0);
          return std::pair{(b + w - 2.0) * (b + w - 2.0), g};
        },
        1e-10);
    CHECK(report.passed);
  }

  TEST_CASE("grad_check fails on a corrupted backward") {
    const auto net = Mlp::uniform_init({4, 6, 1}, 3);
    const auto x = random_matrix(4, 3, 1), y = random_matrix(1, 3, 2);
    const auto report = grad_check(
        net,
        [&](const Mlp& m) {
          auto r = squared_loss(m, x, y);
          r.second[0].weight(0, 0) *= 1.5;
          r.second[0].weight(0, 0) += 0.1;
          return r;
        },
        1e-4);
    CHECK_FALSE(report.passed);
    CHECK(report.worst_index == 0);
  }

  TEST_CASE("checkpoint round-trip is exact") {
    const auto net = Mlp::uniform_init({3, 7, 2}, 21, Activation::Tanh);
    std::stringstream ss;
    write_mlp(ss, net);
    const auto back = read_mlp(ss);
    CHECK(back.widths() == net.widths());
    CHECK(back.activation() == Activation::Tanh);
    CHECK(back.flatten() == net.flatten());
  }

  TEST_CASE("checkpoint reader rejects foreign bytes") {
    std::stringstream ss("not a checkpoint at all");
    CHECK_THROWS_AS(read_mlp(ss), DataError);
  }
}
