#include "iwdd/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace iwdd {

GradCheckReport check_gradient(const std::function<double(const Eigen::VectorXd&)>& loss,
                               const Eigen::VectorXd& point, const Eigen::VectorXd& analytic,
                               const GradCheckOptions& opts) {
  GradCheckReport report;
  Eigen::VectorXd x = point;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + opts.step;
    const double up = loss(x);
    x[i] = orig - opts.step;
    const double down = loss(x);
    x[i] = orig;
    const double numeric = (up - down) / (2.0 * opts.step);
    const double abs_err = std::abs(numeric - analytic[i]);
    const double rel_err = abs_err / std::max({std::abs(numeric), std::abs(analytic[i]), opts.floor});
    if (rel_err > report.max_rel_error || report.worst_index < 0) {
      report.max_rel_error = rel_err;
      report.worst_index = i;
    }
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    ++report.checked;
  }
  report.passed = report.max_rel_error <= opts.tolerance;
  return report;
}

GradCheckReport grad_check(const Mlp& net, const NetLossFn& loss_fn, double tolerance) {
  const auto analytic = flatten(loss_fn(net).second);
  Mlp probe = net;
  auto loss = [&](const Eigen::VectorXd& params) {
    probe.assign(params);
    return loss_fn(probe).first;
  };
  GradCheckOptions opts;
  opts.tolerance = tolerance;
  return check_gradient(loss, net.flatten(), analytic, opts);
}

}  // namespace iwdd
