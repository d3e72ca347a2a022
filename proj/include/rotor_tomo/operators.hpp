#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <numbers>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "rotor_tomo/basis.hpp"
#include "rotor_tomo/errors.hpp"
#include "rotor_tomo/legendre.hpp"

namespace rotor_tomo {

using cd = std::complex<double>;
using SparseMatrixC = Eigen::SparseMatrix<cd, Eigen::RowMajor>;

/// Unit lab-frame direction of a linearly polarized field.
class Polarization {
 public:
  Polarization() : n_(0.0, 0.0, 1.0) {}

  explicit Polarization(const Eigen::Vector3d& n) : n_(n) {
    if (!n.allFinite() || std::abs(n.norm() - 1.0) > 1e-12) {
      throw InputError("polarization vector must have unit norm");
    }
  }

  static Polarization x() { return Polarization(Eigen::Vector3d(1, 0, 0)); }
  static Polarization y() { return Polarization(Eigen::Vector3d(0, 1, 0)); }
  static Polarization z() { return Polarization(Eigen::Vector3d(0, 0, 1)); }
  /// In the XY plane at 45 degrees to X.
  static Polarization xy45() {
    return Polarization(Eigen::Vector3d(std::numbers::sqrt2 / 2, std::numbers::sqrt2 / 2, 0.0));
  }

  const Eigen::Vector3d& direction() const { return n_; }

 private:
  Eigen::Vector3d n_;
};

/// Named polarizations accepted by configs: X, Y, Z, XY45.
inline Polarization parse_polarization(std::string_view name) {
  if (name == "X") return Polarization::x();
  if (name == "Y") return Polarization::y();
  if (name == "Z") return Polarization::z();
  if (name == "XY45") return Polarization::xy45();
  throw InputError("unknown polarization '" + std::string(name) + "' (expected X, Y, Z, XY45 or a unit vector)");
}

enum class ObservableKind { cos2_theta, cos2_phi, sin2theta_sin2phi };

inline std::string_view to_string(ObservableKind k) {
  switch (k) {
    case ObservableKind::cos2_theta: return "cos2_theta";
    case ObservableKind::cos2_phi: return "cos2_phi";
    case ObservableKind::sin2theta_sin2phi: return "sin2theta_sin2phi";
  }
  return "?";
}

inline ObservableKind parse_observable(std::string_view s) {
  if (s == "cos2_theta") return ObservableKind::cos2_theta;
  if (s == "cos2_phi") return ObservableKind::cos2_phi;
  if (s == "sin2theta_sin2phi") return ObservableKind::sin2theta_sin2phi;
  throw InputError("unknown observable '" + std::string(s) +
                   "' (expected cos2_theta, cos2_phi or sin2theta_sin2phi)");
}

/// Allowed (dJ, dM) couplings. An empty delta_j set means any even dJ.
struct SelectionRules {
  std::set<int> delta_j;
  std::set<int> delta_m;

  bool allows(int dj, int dm) const {
    if (!delta_m.contains(dm)) return false;
    if (delta_j.empty()) return dj % 2 == 0;
    return delta_j.contains(dj);
  }
};

/// Dense-in-spirit Hermitian matrix over a RotorBasis, stored sparse.
class HermitianOperator {
 public:
  HermitianOperator() = default;
  HermitianOperator(RotorBasis basis, SparseMatrixC matrix, SelectionRules rules)
      : basis_(std::move(basis)), matrix_(std::move(matrix)), rules_(std::move(rules)) {}

  const RotorBasis& basis() const { return basis_; }
  const SparseMatrixC& matrix() const { return matrix_; }
  const SelectionRules& selection_rules() const { return rules_; }
  Eigen::MatrixXcd dense() const { return Eigen::MatrixXcd(matrix_); }

  cd element(int Jp, int Mp, int J, int M) const {
    return matrix_.coeff(static_cast<Eigen::Index>(basis_.index(Jp, Mp)),
                         static_cast<Eigen::Index>(basis_.index(J, M)));
  }

  /// max |A - A^dagger| over stored entries.
  double hermiticity_residual() const {
    const SparseMatrixC adj = matrix_.adjoint();
    const SparseMatrixC diff = matrix_ - adj;
    double r = 0.0;
    for (Eigen::Index k = 0; k < diff.outerSize(); ++k) {
      for (SparseMatrixC::InnerIterator it(diff, k); it; ++it) r = std::max(r, std::abs(it.value()));
    }
    return r;
  }

  /// Largest entry outside the declared selection rules.
  double selection_rule_residual() const {
    double r = 0.0;
    for (Eigen::Index k = 0; k < matrix_.outerSize(); ++k) {
      for (SparseMatrixC::InnerIterator it(matrix_, k); it; ++it) {
        const auto& row = basis_.state(static_cast<std::size_t>(it.row()));
        const auto& col = basis_.state(static_cast<std::size_t>(it.col()));
        if (!rules_.allows(row.J - col.J, row.M - col.M)) r = std::max(r, std::abs(it.value()));
      }
    }
    return r;
  }

 private:
  RotorBasis basis_;
  SparseMatrixC matrix_;
  SelectionRules rules_;
};

/// Angular function f(cos theta, phi) to be represented as a matrix.
using AngularFunction = std::function<double(double cos_theta, double phi)>;

struct QuadratureOptions {
  /// Largest |dM| the function can couple (its phi-Fourier degree).
  int max_delta_m = 4;
  /// Extra Gauss-Legendre nodes beyond j_max + 2.
  int extra_theta_nodes = 4;
  /// Entries below this magnitude are not stored.
  double drop_tolerance = 1e-15;
};

/// <J'M'| f |JM> by Gauss-Legendre in cos(theta) and a uniform rule in phi.
/// The phi integral is done first, so only dM blocks with nonzero Fourier weight are assembled.
inline HermitianOperator build_operator_by_quadrature(const RotorBasis& basis, const AngularFunction& f,
                                                      SelectionRules rules, const QuadratureOptions& opt = {}) {
  const int L = basis.j_max();
  const GaussLegendreRule rule = gauss_legendre(L + 2 + opt.extra_theta_nodes);
  const Eigen::MatrixXd theta = spherical_theta_table(basis, rule.nodes);
  const int qmax = opt.max_delta_m;
  // exact for e^{i k phi}, |k| < n_phi, and f of Fourier degree <= qmax
  const int n_phi = 4 * qmax + 8;
  const auto nx = rule.nodes.size();

  // fourier(q + qmax)(i) = w_i * \int_0^{2pi} f(x_i, phi) e^{i q phi} dphi
  std::vector<Eigen::VectorXcd> fourier(2 * static_cast<std::size_t>(qmax) + 1, Eigen::VectorXcd::Zero(nx));
  std::vector<bool> active(fourier.size(), false);
  for (Eigen::Index i = 0; i < nx; ++i) {
    std::vector<double> samples(static_cast<std::size_t>(n_phi));
    for (int k = 0; k < n_phi; ++k) samples[k] = f(rule.nodes[i], 2.0 * std::numbers::pi * k / n_phi);
    for (int q = -qmax; q <= qmax; ++q) {
      cd acc = 0.0;
      for (int k = 0; k < n_phi; ++k) {
        acc += samples[k] * std::polar(1.0, 2.0 * std::numbers::pi * q * k / n_phi);
      }
      fourier[q + qmax][i] = acc * (2.0 * std::numbers::pi / n_phi) * rule.weights[i];
    }
  }
  for (std::size_t q = 0; q < fourier.size(); ++q) active[q] = fourier[q].cwiseAbs().maxCoeff() > 1e-15;

  // column indices of each M, ordered by J
  std::vector<std::vector<Eigen::Index>> by_m(2 * static_cast<std::size_t>(L) + 1);
  for (std::size_t n = 0; n < basis.size(); ++n) by_m[basis.state(n).M + L].push_back(static_cast<Eigen::Index>(n));

  std::vector<Eigen::Triplet<cd>> triplets;
  for (int M = -L; M <= L; ++M) {
    const auto& cols = by_m[M + L];
    if (cols.empty()) continue;
    Eigen::MatrixXd tm(nx, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) tm.col(static_cast<Eigen::Index>(c)) = theta.col(cols[c]);
    for (int Mp = std::max(-L, M - qmax); Mp <= std::min(L, M + qmax); ++Mp) {
      const int q = M - Mp;
      if (!active[q + qmax]) continue;
      const auto& rows = by_m[Mp + L];
      if (rows.empty()) continue;
      Eigen::MatrixXd tmp(nx, static_cast<Eigen::Index>(rows.size()));
      for (std::size_t r = 0; r < rows.size(); ++r) tmp.col(static_cast<Eigen::Index>(r)) = theta.col(rows[r]);
      const Eigen::MatrixXcd block =
          tmp.transpose().cast<cd>() * fourier[q + qmax].asDiagonal() * tm.cast<cd>();
      for (Eigen::Index r = 0; r < block.rows(); ++r) {
        for (Eigen::Index c = 0; c < block.cols(); ++c) {
          if (std::abs(block(r, c)) > opt.drop_tolerance) triplets.emplace_back(rows[r], cols[c], block(r, c));
        }
      }
    }
  }
  const auto d = static_cast<Eigen::Index>(basis.size());
  SparseMatrixC m(d, d);
  m.setFromTriplets(triplets.begin(), triplets.end());
  const SparseMatrixC adj = m.adjoint();
  SparseMatrixC herm = (m + adj) * cd(0.5);
  herm.prune(cd(0.0), opt.drop_tolerance);
  herm.makeCompressed();
  return HermitianOperator(basis, std::move(herm), std::move(rules));
}

/// cos^2 of the angle between the molecular axis and `pol`.
inline HermitianOperator cos2_operator(const RotorBasis& basis, const Polarization& pol) {
  const Eigen::Vector3d n = pol.direction();
  SelectionRules rules{{-2, 0, 2}, {0}};
  if (std::abs(n.x()) > 0.0 || std::abs(n.y()) > 0.0) {
    rules.delta_m = {-2, 0, 2};
    if (std::abs(n.z()) > 0.0) rules.delta_m = {-2, -1, 0, 1, 2};
  }
  const AngularFunction f = [n](double c, double phi) {
    const double s = std::sqrt(std::max(0.0, 1.0 - c * c));
    const double proj = n.x() * s * std::cos(phi) + n.y() * s * std::sin(phi) + n.z() * c;
    return proj * proj;
  };
  return build_operator_by_quadrature(basis, f, std::move(rules), {.max_delta_m = 2});
}

inline HermitianOperator observable_operator(const RotorBasis& basis, ObservableKind kind) {
  switch (kind) {
    case ObservableKind::cos2_theta:
      return cos2_operator(basis, Polarization::z());
    case ObservableKind::cos2_phi:
      return build_operator_by_quadrature(
          basis, [](double, double phi) { return std::cos(phi) * std::cos(phi); },
          SelectionRules{{}, {-2, 0, 2}}, {.max_delta_m = 2});
    case ObservableKind::sin2theta_sin2phi:
      return build_operator_by_quadrature(
          basis, [](double c, double phi) { return (1.0 - c * c) * std::sin(2.0 * phi); },
          SelectionRules{{-2, 0, 2}, {-2, 2}}, {.max_delta_m = 2});
  }
  throw InputError("unknown observable kind");
}

/// Rigid-rotor energies h_J = J(J+1)/(2I) per basis state, hartree.
struct Spectrum {
  RotorBasis basis;
  double moment_of_inertia = 1.0;
  Eigen::VectorXd energies;
  /// dh/dI = -J(J+1)/(2 I^2)
  Eigen::VectorXd energy_derivative;
};

inline Spectrum build_spectrum(const RotorBasis& basis, double moment_of_inertia) {
  if (!(moment_of_inertia > 0.0) || !std::isfinite(moment_of_inertia)) {
    throw InputError("moment of inertia must be positive and finite");
  }
  const auto d = static_cast<Eigen::Index>(basis.size());
  Spectrum s{basis, moment_of_inertia, Eigen::VectorXd(d), Eigen::VectorXd(d)};
  for (Eigen::Index n = 0; n < d; ++n) {
    const double jj = basis.state(static_cast<std::size_t>(n)).J;
    s.energies[n] = jj * (jj + 1.0) / (2.0 * moment_of_inertia);
    s.energy_derivative[n] = -jj * (jj + 1.0) / (2.0 * moment_of_inertia * moment_of_inertia);
  }
  return s;
}

/// Diagonal of U(t) = exp(-i h t).
inline Eigen::VectorXcd propagator_phases(const Eigen::VectorXd& energies, double t) {
  Eigen::VectorXcd u(energies.size());
  for (Eigen::Index n = 0; n < energies.size(); ++n) u[n] = std::polar(1.0, -energies[n] * t);
  return u;
}

}  // namespace rotor_tomo
