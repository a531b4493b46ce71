#pragma once

// Reference computations used by the tests. Kept independent of the library
// code they check.

#include <algorithm>
#include <cmath>
#include <functional>

#include <Eigen/Dense>

namespace oracle {

// Central differences of f at p, one coordinate at a time.
inline Eigen::VectorXd central_diff(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& p,
                                    double h = 1e-5) {
  Eigen::VectorXd g(p.size());
  Eigen::VectorXd q = p;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    q[i] = p[i] + h;
    const double up = f(q);
    q[i] = p[i] - h;
    const double down = f(q);
    q[i] = p[i];
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)
inline double max_rel_error(const Eigen::VectorXd& a, const Eigen::VectorXd& n, double floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(n[i]), floor});
    worst = std::max(worst, std::abs(a[i] - n[i]) / scale);
  }
  return worst;
}

// Composite Simpson rule on [a, b] with an even number of panels.
inline double simpson(const std::function<double(double)>& f, double a, double b, int panels) {
  if (panels % 2) ++panels;
  const double h = (b - a) / panels;
  double s = f(a) + f(b);
  for (int i = 1; i < panels; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }

inline double logistic(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// E_{x ~ N(0,1)}[1 / (4 pi(x)(1 - pi(x))) - 1] for pi(x) = logistic(s x),
// which simplifies to E[cosh(s x / 2)^2] - 1 = (E[cosh(s x)] - 1) / 2
// = (exp(s^2 / 2) - 1) / 2. The quadrature below is used; the closed form is
// a cross-check.
inline double expected_delta_logistic(double slope) {
  auto integrand = [slope](double x) {
    const double p = logistic(slope * x);
    return (1.0 / (4.0 * p * (1.0 - p)) - 1.0) * normal_pdf(x);
  };
  return simpson(integrand, -12.0, 12.0, 20000);
}

}  // namespace oracle
