#pragma once

// Random reconstruction problems shared by the gradient tests and the acceptance run.

#include <cstdint>
#include <random>
#include <string>

#include "rotor_tomo/problem.hpp"

namespace fixtures {

using namespace rotor_tomo;

enum class Kind { amplitudes, populations, rpwf, temperature };

inline std::string name(Kind k) {
  switch (k) {
    case Kind::amplitudes: return "amplitudes";
    case Kind::populations: return "populations";
    case Kind::rpwf: return "rpwf";
    case Kind::temperature: return "temperature";
  }
  return "?";
}

struct Instance {
  ReconstructionProblem problem;
  ParameterVector x;
};

inline Eigen::VectorXcd random_complex(Eigen::Index d, std::mt19937_64& gen) {
  std::normal_distribution<double> n;
  Eigen::VectorXcd v(d);
  for (Eigen::Index i = 0; i < d; ++i) v[i] = cd(n(gen), n(gen));
  return v;
}

inline Eigen::VectorXd random_simplex(Eigen::Index n, std::mt19937_64& gen) {
  std::uniform_real_distribution<double> u(0.2, 1.0);
  Eigen::VectorXd p(n);
  for (Eigen::Index i = 0; i < n; ++i) p[i] = u(gen);
  return p / p.sum();
}

/// Replaces every reference with the model at x_true plus a perturbation, so residuals are nonzero.
inline void attach_references(ReconstructionProblem& pr, const ParameterVector& x_true, std::mt19937_64& gen) {
  const Evaluator ev(pr);
  const Eigen::MatrixXd model = ev.model_signals(x_true);
  std::normal_distribution<double> n(0.0, 0.02);
  for (std::size_t o = 0; o < pr.trajectories.size(); ++o) {
    auto& ref = pr.trajectories[o].reference;
    ref.values = model.col(static_cast<Eigen::Index>(o));
    for (Eigen::Index c = 0; c < ref.values.size(); ++c) ref.values[c] += n(gen);
  }
}

inline std::vector<TrajectoryTerm> blank_terms(const std::vector<ObservableKind>& kinds, const Eigen::VectorXd& t) {
  std::vector<TrajectoryTerm> out;
  for (auto k : kinds) out.push_back({Trajectory{k, t, Eigen::VectorXd::Zero(t.size())}, 1.0});
  return out;
}

/// Randomized instance with d <= 36; every block relevant to the kind is active.
inline Instance random_instance(Kind kind, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ReconstructionProblem pr;
  const double I = 539010.0 * (0.8 + 0.4 * u(gen));
  const Eigen::VectorXd t = uniform_time_grid(24, 2.0 * std::numbers::pi * 539010.0 * (0.3 + 0.5 * u(gen)));
  if (kind == Kind::amplitudes) {
    pr.basis = build_basis(5, ParityFilter::all_J);  // d = 36
    pr.mode = ModelMode::amplitudes;
    pr.members = 2;
    pr.populations_free = true;
    pr.ridge = 1e-3 * u(gen);
    pr.inertia = {I, true, 1e5, 1e6};
    pr.trajectories = blank_terms({ObservableKind::cos2_theta, ObservableKind::cos2_phi, ObservableKind::sin2theta_sin2phi}, t);
    pr.trajectories[1].weight = 0.5 + u(gen);
    ParameterVector truth = nominal_parameters(pr);
    ParameterVector x = truth;
    for (Eigen::Index j = 0; j < 2; ++j) {
      truth.set_psi(j, random_complex(pr.dim(), gen).normalized());
      x.set_psi(j, random_complex(pr.dim(), gen).normalized());
    }
    truth.p = random_simplex(2, gen);
    x.p = random_simplex(2, gen);
    attach_references(pr, truth, gen);
    x.I = I * (1.0 + 0.01 * (u(gen) - 0.5));
    return {pr, x};
  }

  // kicks need room above the source states; the unknowns stay at most 36
  pr.basis = build_basis(kind == Kind::temperature ? 16 : 10, kind == Kind::temperature ? ParityFilter::even_J_only : ParityFilter::all_J);
  pr.inertia = {I, kind != Kind::temperature, 1e5, 1e6};
  const int src_j = kind == Kind::temperature ? 4 : 2;
  for (std::size_t n = 0; n < pr.basis.size(); ++n) {
    if (pr.basis.state(n).J <= src_j) pr.sources.push_back(static_cast<Eigen::Index>(n));
  }
  const double p1 = 0.3 + 0.4 * u(gen);
  if (kind == Kind::temperature) {
    pr.pulses = {{Polarization::z(), {1.0 + u(gen), false, 0.0, 0.0}, 0.0}};
  } else {
    // X pulse, then a 45 degree XY pulse after a delay; I stays free so the delay is zero here
    pr.pulses = {{Polarization::x(), {p1, true, 0.0, 1.0}, 0.0}, {Polarization::xy45(), {0.3 + 0.3 * u(gen), true, 0.0, 1.0}, 0.0}};
  }
  pr.trajectories = blank_terms({ObservableKind::cos2_theta, ObservableKind::sin2theta_sin2phi}, t);
  const auto np = static_cast<Eigen::Index>(pr.sources.size());
  if (kind == Kind::temperature) {
    pr.mode = ModelMode::temperature;
    pr.temperature = {0.5, true, 0.05, 20.0};
    pr.thermal_parity = ParityFilter::even_J_only;
  } else {
    pr.mode = ModelMode::populations;
    pr.populations_free = true;
  }
  if (kind == Kind::rpwf) pr.rpwf = {true, 6, seed * 7 + 1};
  ParameterVector truth = nominal_parameters(pr);
  if (kind == Kind::temperature) {
    truth.T = 0.4 + 0.6 * u(gen);
  } else {
    truth.p = random_simplex(np, gen);
  }
  attach_references(pr, truth, gen);
  ParameterVector x = nominal_parameters(pr);
  if (kind == Kind::temperature) {
    x.T = truth.T * (1.0 + 0.3 * (u(gen) - 0.5));
  } else {
    x.p = random_simplex(np, gen);
    for (Eigen::Index k = 0; k < x.P.size(); ++k) x.P[k] = truth.P[k] + 0.05 * (u(gen) - 0.5);
    x.I = I * (1.0 + 0.01 * (u(gen) - 0.5));
  }
  return {pr, x};
}

inline double relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& fd) {
  const double scale = std::max(fd.norm(), 1e-300);
  return (analytic - fd).norm() / scale;
}

}  // namespace fixtures
