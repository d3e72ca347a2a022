#include <cmath>

#include <gtest/gtest.h>
#include <unsupported/Eigen/MatrixFunctions>

#include "rotor_tomo/kick.hpp"

using namespace rotor_tomo;

namespace {

// exp(i P C) by Pade scaling-and-squaring on a basis padded by 16 quanta, truncated back.
Eigen::MatrixXcd expm_oracle(const RotorBasis& basis, double strength, const Polarization& pol) {
  const RotorBasis big(basis.j_max() + 16, basis.parity());
  const Eigen::MatrixXcd c = cos2_operator(big, pol).dense();
  const Eigen::MatrixXcd v = (cd(0.0, strength) * c).exp();
  const auto d = static_cast<Eigen::Index>(basis.size());
  return v.topLeftCorner(d, d);
}

}  // namespace

TEST(Kick, ZeroStrengthIsIdentity) {
  const auto b = build_basis(6, ParityFilter::all_J);
  const auto k = build_kick(b, 0.0, Polarization::x(), 6);
  EXPECT_LT((k.V.dense() - Eigen::MatrixXcd::Identity(49, 49)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Kick, MatchesScalingAndSquaringOracle) {
  const auto b = build_basis(22, ParityFilter::even_J_only);
  const auto k = build_kick(b, 8.278, Polarization::z(), 0);
  const Eigen::MatrixXcd oracle = expm_oracle(b, 8.278, Polarization::z());
  const auto g = static_cast<Eigen::Index>(b.index(0, 0));
  const Eigen::VectorXcd got = k.V.dense().col(g);
  EXPECT_LT((got - oracle.col(g)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT(k.leakage, 1e-8);
  // only M = 0 states are populated
  for (std::size_t n = 0; n < b.size(); ++n) {
    const auto s = b.state(n);
    if (s.M != 0) EXPECT_LT(std::abs(got[static_cast<Eigen::Index>(n)]), 1e-14);
  }
  EXPECT_NEAR(got.squaredNorm(), 1.0 - k.leakage, 1e-12);
}

TEST(Kick, OffAxisPolarizationMatchesOracle) {
  const auto b = build_basis(14, ParityFilter::all_J);
  const auto k = build_kick(b, 2.5, Polarization::xy45(), 2);
  const Eigen::MatrixXcd oracle = expm_oracle(b, 2.5, Polarization::xy45());
  const Eigen::MatrixXcd got = k.V.dense();
  for (std::size_t n = 0; n < b.size(); ++n) {
    if (b.state(n).J > 2) continue;
    const auto c = static_cast<Eigen::Index>(n);
    EXPECT_LT((got.col(c) - oracle.col(c)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Kick, UnitaryOnInnerBlock) {
  const auto b = build_basis(30, ParityFilter::all_J);
  const auto k = build_kick(b, 8.278, Polarization::z(), 4);
  const Eigen::MatrixXcd v = k.V.dense();
  for (std::size_t n = 0; n < b.size(); ++n) {
    if (b.state(n).J > 4) continue;
    for (std::size_t m = 0; m < b.size(); ++m) {
      if (b.state(m).J > 4) continue;
      const cd ip = v.col(static_cast<Eigen::Index>(n)).dot(v.col(static_cast<Eigen::Index>(m)));
      EXPECT_LT(std::abs(ip - (n == m ? 1.0 : 0.0)), 1e-10);
    }
  }
  // norm preservation for a random state on the inner block
  Eigen::VectorXcd psi = Eigen::VectorXcd::Zero(static_cast<Eigen::Index>(b.size()));
  for (int n = 0; n < 25; ++n) psi[n] = cd(std::sin(1.3 * n + 0.2), std::cos(0.7 * n));
  psi.normalize();
  EXPECT_NEAR(k.V.apply(psi).norm(), 1.0, 1e-10);
}

TEST(Kick, DerivativeMatchesCentralDifference) {
  const auto b = build_basis(20, ParityFilter::all_J);
  for (const auto& pol : {Polarization::z(), Polarization::xy45()}) {
    const KickGenerator gen(b, pol, 6.0);
    const double p = 3.7, h = 1e-5;
    const Eigen::MatrixXcd fd = (gen(p + h).V.dense() - gen(p - h).V.dense()) / (2 * h);
    const Eigen::MatrixXcd an = gen(p).dV_dP.dense();
    EXPECT_LT((an - fd).norm() / an.norm(), 1e-7);
  }
}

TEST(Kick, DerivativeIsICTimesVOnSourceColumns) {
  const auto b = build_basis(26, ParityFilter::all_J);
  const auto k = build_kick(b, 5.174, Polarization::z(), 2);
  const Eigen::MatrixXcd c = cos2_operator(b, Polarization::z()).dense();
  const Eigen::MatrixXcd v = k.V.dense();
  const Eigen::MatrixXcd dv = k.dV_dP.dense();
  for (std::size_t n = 0; n < b.size(); ++n) {
    if (b.state(n).J > 2) continue;
    const auto col = static_cast<Eigen::Index>(n);
    EXPECT_LT((dv.col(col) - cd(0, 1) * c * v.col(col)).norm(), 1e-8);
  }
}

TEST(Kick, InsufficientBasisRaisesConvergenceError) {
  const auto b = build_basis(8, ParityFilter::all_J);
  EXPECT_THROW(build_kick(b, 8.278, Polarization::z(), 0), ConvergenceError);
}

TEST(Preparation, SingleKickIsTheKick) {
  const auto b = build_basis(16, ParityFilter::all_J);
  const auto spec = build_spectrum(b, 539010.0);
  const auto k = build_kick(b, 3.0, Polarization::x(), 0);
  const auto total = compose_preparation({{k, 0.0}}, spec, 0);
  EXPECT_LT((total.dense() - k.V.dense()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Preparation, ZeroDelayIsMatrixProduct) {
  const auto b = build_basis(16, ParityFilter::all_J);
  const auto spec = build_spectrum(b, 539010.0);
  const auto k1 = build_kick(b, 2.0, Polarization::x(), 0);
  const auto k2 = build_kick(b, 2.0, Polarization::xy45(), std::nullopt);
  const auto total = compose_preparation({{k1, 0.0}, {k2, 0.0}}, spec, 0);
  EXPECT_LT((total.dense() - k2.V.dense() * k1.V.dense()).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Preparation, DelayedCrossPolarizedPulsesMatchSequentialPropagation) {
  const auto b = build_basis(18, ParityFilter::all_J);
  const double inertia = 539010.0;
  const auto spec = build_spectrum(b, inertia);
  const double tau = 0.13 * 2.0 * std::numbers::pi * inertia;
  const auto k1 = build_kick(b, 2.0, Polarization::x(), 0);
  const auto k2 = build_kick(b, 2.0, Polarization::xy45(), std::nullopt);
  const auto prep = compose_preparation_with_derivatives({{k1, 0.0}, {k2, tau}}, spec, 0);
  const Eigen::MatrixXcd v1 = k1.V.dense(), v2 = k2.V.dense();
  for (std::size_t n = 0; n < 12; ++n) {
    Eigen::VectorXcd e = Eigen::VectorXcd::Zero(static_cast<Eigen::Index>(b.size()));
    e[static_cast<Eigen::Index>(n)] = 1.0;
    Eigen::VectorXcd s = v1 * e;
    for (Eigen::Index i = 0; i < s.size(); ++i) s[i] *= std::polar(1.0, -spec.energies[i] * tau);
    s = v2 * s;
    EXPECT_LT((prep.total.apply(e) - s).cwiseAbs().maxCoeff(), 1e-13);
  }
  // derivative with respect to the second strength: FD on the composed product
  const double h = 1e-5;
  const KickGenerator g2(b, Polarization::xy45(), 3.0);
  const Eigen::MatrixXcd plus = compose_preparation({{k1, 0.0}, {g2(2.0 + h), tau}}, spec).dense();
  const Eigen::MatrixXcd minus = compose_preparation({{k1, 0.0}, {g2(2.0 - h), tau}}, spec).dense();
  const Eigen::MatrixXcd fd = (plus - minus) / (2 * h);
  EXPECT_LT((prep.d_total_dP[1].dense() - fd).norm() / fd.norm(), 1e-7);
  // unitary on the source column
  EXPECT_NEAR(prep.total.apply(Eigen::VectorXcd::Unit(static_cast<Eigen::Index>(b.size()), 0)).norm(), 1.0, 1e-10);
}

TEST(Preparation, RejectsBasisMismatchAndNegativeDelay) {
  const auto b = build_basis(12, ParityFilter::all_J);
  const auto other = build_basis(14, ParityFilter::all_J);
  const auto k = build_kick(b, 1.0, Polarization::z(), 0);
  EXPECT_THROW(compose_preparation({{k, 0.0}}, build_spectrum(other, 1.0)), InputError);
  EXPECT_THROW(compose_preparation({{k, 0.0}, {k, -1.0}}, build_spectrum(b, 1.0)), InputError);
  EXPECT_THROW(compose_preparation({}, build_spectrum(b, 1.0)), InputError);
}
