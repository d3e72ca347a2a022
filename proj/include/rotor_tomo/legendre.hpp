#pragma once

#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "rotor_tomo/basis.hpp"

namespace rotor_tomo {

/// Gauss-Legendre nodes and weights on [-1, 1]; exact for polynomials of degree <= 2n-1.
struct GaussLegendreRule {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;
};

inline GaussLegendreRule gauss_legendre(int n) {
  if (n < 1) throw InputError("Gauss-Legendre rule needs at least one node");
  // Returns (P_n(x), P_n'(x)) by the three-term recurrence.
  const auto legendre = [n](double x) {
    double p0 = 1.0, p1 = x;
    for (int k = 2; k <= n; ++k) {
      const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
      p0 = p1;
      p1 = p2;
    }
    const double pn = (n == 1) ? x : p1;
    const double pnm1 = (n == 1) ? 1.0 : p0;
    return std::pair{pn, n * (x * pn - pnm1) / (x * x - 1.0)};
  };

  GaussLegendreRule rule{Eigen::VectorXd(n), Eigen::VectorXd(n)};
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    for (int iter = 0; iter < 100; ++iter) {
      const auto [pn, dp] = legendre(x);
      const double dx = pn / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    const double dp = legendre(x).second;
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    rule.nodes[i] = x;
    rule.weights[i] = w;
    rule.nodes[n - 1 - i] = -x;
    rule.weights[n - 1 - i] = w;
  }
  if (n % 2 == 1) rule.nodes[n / 2] = 0.0;
  return rule;
}

/// Theta_{JM}(x) such that Y_{JM}(theta, phi) = Theta_{JM}(cos theta) exp(i M phi),
/// Condon-Shortley phase, unit norm over the sphere. Columns follow the basis order.
inline Eigen::MatrixXd spherical_theta_table(const RotorBasis& basis, const Eigen::VectorXd& x) {
  const int L = basis.j_max();
  const auto nx = x.size();
  Eigen::MatrixXd table(nx, static_cast<Eigen::Index>(basis.size()));
  std::vector<double> column(static_cast<std::size_t>(L) + 1);
  for (Eigen::Index i = 0; i < nx; ++i) {
    const double c = x[i];
    const double s = std::sqrt(std::max(0.0, 1.0 - c * c));
    double pmm = std::sqrt(1.0 / (4.0 * std::numbers::pi));
    for (int m = 0; m <= L; ++m) {
      if (m > 0) pmm *= -std::sqrt((2.0 * m + 1.0) / (2.0 * m)) * s;
      // upward recurrence in l at fixed m
      column[m] = pmm;
      if (m + 1 <= L) column[m + 1] = c * std::sqrt(2.0 * m + 3.0) * pmm;
      for (int l = m + 2; l <= L; ++l) {
        const double a = std::sqrt((4.0 * l * l - 1.0) / (double(l) * l - double(m) * m));
        const double b = std::sqrt(((l - 1.0) * (l - 1.0) - double(m) * m) /
                                   (4.0 * (l - 1.0) * (l - 1.0) - 1.0));
        column[l] = a * (c * column[l - 1] - b * column[l - 2]);
      }
      for (int l = m; l <= L; ++l) {
        if (!basis.admits(l)) continue;
        table(i, static_cast<Eigen::Index>(basis.index(l, m))) = column[l];
        if (m > 0) {
          const double sign = (m % 2 == 0) ? 1.0 : -1.0;
          table(i, static_cast<Eigen::Index>(basis.index(l, -m))) = sign * column[l];
        }
      }
    }
  }
  return table;
}

}  // namespace rotor_tomo
