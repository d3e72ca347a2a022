#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "rotor_tomo/errors.hpp"
#include "rotor_tomo/problem.hpp"

namespace rotor_tomo {

/// Euclidean projection onto {p >= 0, sum p = 1} by the sort-and-threshold method.
inline Eigen::VectorXd project_simplex(const Eigen::VectorXd& v) {
  if (v.size() == 0) throw InputError("cannot project an empty vector onto the simplex");
  std::vector<double> u(v.data(), v.data() + v.size());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0.0, theta = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    cumulative += u[k];
    const double t = (cumulative - 1.0) / static_cast<double>(k + 1);
    if (u[k] - t > 0.0) theta = t;
  }
  Eigen::VectorXd out = (v.array() - theta).max(0.0).matrix();
  // absorb rounding so the sum is 1 to the last bit that matters
  const double s = out.sum();
  if (s > 0.0) out /= s;
  return out;
}

/// Zero the components outside `mask`, then scale to unit norm. An empty mask means no mask.
inline Eigen::VectorXcd project_masked_sphere(const Eigen::VectorXcd& v, const Eigen::VectorXd& mask) {
  Eigen::VectorXcd out = v;
  if (mask.size() != 0) {
    if (mask.size() != v.size()) throw InputError("support mask length does not match the state");
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (mask[i] == 0.0) out[i] = 0.0;
    }
  }
  const double n = out.norm();
  if (n == 0.0) {
    // no direction to keep; fall back to the first allowed basis state
    Eigen::Index first = 0;
    while (mask.size() != 0 && first < mask.size() && mask[first] == 0.0) ++first;
    if (first >= out.size()) throw InputError("support mask is empty");
    out[first] = 1.0;
    return out;
  }
  return out / n;
}

inline double project_box(double x, double lo, double hi) {
  if (!(lo <= hi)) throw ConfigurationError("infeasible box: lower bound exceeds upper bound");
  return std::clamp(x, lo, hi);
}

struct Box {
  double lo = -INFINITY;
  double hi = INFINITY;
};

/// Per-block constraints. Blocks are variable-disjoint, so projecting each block on its own
/// gives the projection onto the product set.
struct ConstraintSet {
  Eigen::Index members = 0;
  Eigen::Index dim = 0;
  bool unit_sphere = true;
  Eigen::VectorXd support;
  bool simplex = true;
  std::vector<Box> strength;
  Box inertia{0.0, INFINITY};
  Box temperature{0.0, INFINITY};

  void validate() const {
    const auto check = [](const Box& b) {
      if (!(b.lo <= b.hi)) throw ConfigurationError("infeasible box: lower bound exceeds upper bound");
    };
    for (const auto& b : strength) check(b);
    check(inertia);
    check(temperature);
  }
};

inline ConstraintSet constraints_for(const ReconstructionProblem& pr) {
  ConstraintSet c;
  c.members = pr.mode == ModelMode::amplitudes ? pr.members : 0;
  c.dim = pr.dim();
  c.support = pr.support;
  for (const auto& p : pr.pulses) {
    c.strength.push_back(p.strength.free ? Box{p.strength.lo, p.strength.hi} : Box{p.strength.value, p.strength.value});
  }
  c.inertia = pr.inertia.free ? Box{pr.inertia.lo, pr.inertia.hi} : Box{pr.inertia.value, pr.inertia.value};
  c.temperature = pr.temperature.free ? Box{pr.temperature.lo, pr.temperature.hi} : Box{pr.temperature.value, pr.temperature.value};
  c.validate();
  return c;
}

/// Which blocks the projection actually moved.
struct ProjectionActivity {
  bool amplitudes = false, populations = false, strength = false, inertia = false, temperature = false;
};

/// Projects the active blocks of x; frozen blocks are returned untouched.
inline ParameterVector project(const ParameterVector& x, const ConstraintSet& c, ProjectionActivity* activity = nullptr) {
  c.validate();
  ParameterVector y = x;
  ProjectionActivity act;
  if ((x.active.a || x.active.b) && c.unit_sphere) {
    for (Eigen::Index j = 0; j < c.members; ++j) {
      const Eigen::VectorXcd v = x.psi(j, c.dim);
      const Eigen::VectorXcd pv = project_masked_sphere(v, c.support);
      if ((pv - v).cwiseAbs().maxCoeff() > 0.0) act.amplitudes = true;
      y.set_psi(j, pv);
    }
  }
  if (x.active.p && c.simplex) {
    y.p = project_simplex(x.p);
    act.populations = (y.p - x.p).cwiseAbs().maxCoeff() > 0.0;
  }
  if (x.active.P) {
    if (static_cast<std::size_t>(x.P.size()) != c.strength.size()) throw InputError("strength constraints do not match the pulses");
    for (Eigen::Index k = 0; k < x.P.size(); ++k) {
      const auto& b = c.strength[static_cast<std::size_t>(k)];
      y.P[k] = project_box(x.P[k], b.lo, b.hi);
      act.strength = act.strength || y.P[k] != x.P[k];
    }
  }
  if (x.active.I) {
    y.I = project_box(x.I, c.inertia.lo, c.inertia.hi);
    act.inertia = y.I != x.I;
  }
  if (x.active.T) {
    y.T = project_box(x.T, c.temperature.lo, c.temperature.hi);
    act.temperature = y.T != x.T;
  }
  if (activity) *activity = act;
  return y;
}

/// Largest constraint violation over the active blocks.
inline double constraint_residual(const ParameterVector& x, const ConstraintSet& c) {
  double r = 0.0;
  if ((x.active.a || x.active.b) && c.unit_sphere) {
    for (Eigen::Index j = 0; j < c.members; ++j) {
      const Eigen::VectorXcd v = x.psi(j, c.dim);
      r = std::max(r, std::abs(v.norm() - 1.0));
      if (c.support.size() != 0) {
        for (Eigen::Index i = 0; i < v.size(); ++i) {
          if (c.support[i] == 0.0) r = std::max(r, std::abs(v[i]));
        }
      }
    }
  }
  if (x.active.p && c.simplex) {
    r = std::max(r, std::abs(x.p.sum() - 1.0));
    r = std::max(r, std::max(0.0, -x.p.minCoeff()));
  }
  if (x.active.P) {
    for (Eigen::Index k = 0; k < x.P.size(); ++k) {
      const auto& b = c.strength[static_cast<std::size_t>(k)];
      r = std::max({r, b.lo - x.P[k], x.P[k] - b.hi});
    }
  }
  if (x.active.I) r = std::max({r, c.inertia.lo - x.I, x.I - c.inertia.hi});
  if (x.active.T) r = std::max({r, c.temperature.lo - x.T, x.T - c.temperature.hi});
  return r;
}

}  // namespace rotor_tomo
