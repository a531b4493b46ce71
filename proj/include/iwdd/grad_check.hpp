#pragma once

#include <functional>
#include <utility>

#include <Eigen/Dense>

#include "iwdd/mlp.hpp"

namespace iwdd {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Eigen::Index worst_index = -1;
  std::size_t checked = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, floor) so exactly-zero
  // gradients do not divide by zero.
  double floor = 1e-6;
};

// Compares `analytic` with central differences of `loss` around `point`.
GradCheckReport check_gradient(const std::function<double(const Eigen::VectorXd&)>& loss,
                               const Eigen::VectorXd& point, const Eigen::VectorXd& analytic,
                               const GradCheckOptions& opts = {});

// Loss over a network plus its analytic parameter gradient.
using NetLossFn = std::function<std::pair<double, LayerGrads>(const Mlp&)>;

GradCheckReport grad_check(const Mlp& net, const NetLossFn& loss_fn, double tolerance = 1e-4);

}  // namespace iwdd
