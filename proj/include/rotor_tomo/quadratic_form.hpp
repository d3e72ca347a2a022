#pragma once

#include <utility>

#include <Eigen/Dense>

#include "rotor_tomo/errors.hpp"
#include "rotor_tomo/operators.hpp"

namespace rotor_tomo {

/// Gradients of f(x) = x^+ U x with respect to a = Re x and b = Im x.
struct QuadGrad {
  Eigen::VectorXd da;
  Eigen::VectorXd db;
};

/// grad_a f = U x + U^T x*, grad_b f = i U^T x* - i U x. U must be Hermitian to 1e-10.
inline QuadGrad quad_grad_a(const Eigen::MatrixXcd& U, const Eigen::VectorXcd& x) {
  if (U.rows() != U.cols() || U.rows() != x.size()) throw InputError("quadratic form dimensions do not match");
  if ((U - U.adjoint()).cwiseAbs().maxCoeff() > 1e-10) throw InputError("quadratic form matrix is not Hermitian");
  const Eigen::VectorXcd ux = U * x;
  const Eigen::VectorXcd utx = U.transpose() * x.conjugate();
  const Eigen::VectorXcd ga = ux + utx;
  const Eigen::VectorXcd gb = cd(0.0, 1.0) * utx - cd(0.0, 1.0) * ux;
  const double scale = std::max(1.0, ga.cwiseAbs().maxCoeff() + gb.cwiseAbs().maxCoeff());
  if (ga.imag().cwiseAbs().maxCoeff() > 1e-12 * scale || gb.imag().cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw NumericalError("quadratic form gradient is not real");
  }
  return {ga.real(), gb.real()};
}

/// Same gradient from the Hermitian shortcut (2 Re Ux, 2 Im Ux); only the action of U is needed.
inline QuadGrad quad_grad_hermitian(const Eigen::VectorXcd& ux) { return {2.0 * ux.real(), 2.0 * ux.imag()}; }

}  // namespace rotor_tomo
