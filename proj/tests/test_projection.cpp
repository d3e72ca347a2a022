#include <random>

#include <gtest/gtest.h>

#include "rotor_tomo/projection.hpp"

using namespace rotor_tomo;

namespace {

// closest point of the 2-simplex by scanning a fine grid of the segment
Eigen::Vector2d brute_force_simplex2(const Eigen::Vector2d& v) {
  Eigen::Vector2d best(0.0, 1.0);
  double best_d = INFINITY;
  for (int i = 0; i <= 200000; ++i) {
    const double a = i / 200000.0;
    const Eigen::Vector2d q(a, 1.0 - a);
    const double d = (q - v).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = q;
    }
  }
  return best;
}

}  // namespace

TEST(Simplex, InteriorPoint) {
  const Eigen::VectorXd p = project_simplex(Eigen::Vector2d(0.6, 0.6));
  EXPECT_NEAR(p[0], 0.5, 1e-15);
  EXPECT_NEAR(p[1], 0.5, 1e-15);
}

TEST(Simplex, BoundaryPoint) {
  const Eigen::VectorXd p = project_simplex(Eigen::Vector2d(1.5, -0.2));
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], 0.0);
  const Eigen::Vector2d b = brute_force_simplex2(Eigen::Vector2d(1.5, -0.2));
  EXPECT_NEAR((p - b).norm(), 0.0, 1e-5);
}

TEST(Simplex, MatchesGridSearch) {
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int k = 0; k < 1000; ++k) {
    const Eigen::Vector2d v(u(gen), u(gen));
    const Eigen::VectorXd p = project_simplex(v);
    ASSERT_LT((p - brute_force_simplex2(v)).norm(), 1e-5) << v.transpose();
  }
}

TEST(Simplex, OptimalityInHigherDimension) {
  // the projection q satisfies <v - q, y - q> <= 0 for every feasible y
  std::mt19937_64 gen(5);
  std::normal_distribution<double> n;
  for (int k = 0; k < 200; ++k) {
    Eigen::VectorXd v(7);
    for (auto& c : v) c = n(gen);
    const Eigen::VectorXd q = project_simplex(v);
    ASSERT_NEAR(q.sum(), 1.0, 1e-14);
    ASSERT_GE(q.minCoeff(), 0.0);
    for (int i = 0; i < 7; ++i) {
      const Eigen::VectorXd y = Eigen::VectorXd::Unit(7, i);
      ASSERT_LE((v - q).dot(y - q), 1e-12);
    }
  }
}

TEST(Simplex, Idempotent) {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> n;
  Eigen::VectorXd v(40);
  for (auto& c : v) c = n(gen);
  const Eigen::VectorXd q = project_simplex(v);
  EXPECT_LT((project_simplex(q) - q).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Simplex, EmptyRejected) { EXPECT_THROW(project_simplex(Eigen::VectorXd()), InputError); }

TEST(Sphere, MaskThenNormalize) {
  Eigen::VectorXcd v(3);
  v << cd(3.0, 0.0), cd(0.0, 4.0), cd(100.0, 0.0);
  const Eigen::VectorXd mask = Eigen::Vector3d(1.0, 1.0, 0.0);
  const Eigen::VectorXcd p = project_masked_sphere(v, mask);
  EXPECT_NEAR(std::abs(p[0] - cd(0.6, 0.0)), 0.0, 1e-15);
  EXPECT_NEAR(std::abs(p[1] - cd(0.0, 0.8)), 0.0, 1e-15);
  EXPECT_EQ(p[2], cd(0.0));
  EXPECT_LT((project_masked_sphere(p, mask) - p).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Sphere, ZeroFallsBackToAllowedState) {
  const Eigen::VectorXd mask = Eigen::Vector3d(0.0, 1.0, 1.0);
  Eigen::VectorXcd v = Eigen::VectorXcd::Zero(3);
  v[0] = 2.0;
  const Eigen::VectorXcd p = project_masked_sphere(v, mask);
  EXPECT_EQ(p[1], cd(1.0));
  EXPECT_THROW(project_masked_sphere(v, Eigen::Vector3d::Zero()), InputError);
}

TEST(Box, ClampAndInfeasible) {
  EXPECT_EQ(project_box(5.0, 0.0, 1.0), 1.0);
  EXPECT_EQ(project_box(-5.0, 0.0, 1.0), 0.0);
  EXPECT_EQ(project_box(0.3, 0.0, 1.0), 0.3);
  EXPECT_THROW(project_box(0.3, 1.0, 0.0), ConfigurationError);
  ConstraintSet c;
  c.inertia = {2.0, 1.0};
  EXPECT_THROW(c.validate(), ConfigurationError);
}

TEST(Product, ProjectsEachActiveBlock) {
  ConstraintSet c;
  c.members = 1;
  c.dim = 2;
  c.strength = {{0.0, 1.0}};
  c.inertia = {10.0, 20.0};
  ParameterVector x;
  x.a = Eigen::Vector2d(3.0, 0.0);
  x.b = Eigen::Vector2d(0.0, 4.0);
  x.P = Eigen::VectorXd::Constant(1, 2.0);
  x.I = 5.0;
  x.T = -1.0;
  x.active = {true, true, false, true, true, false};
  ProjectionActivity act;
  const ParameterVector y = project(x, c, &act);
  EXPECT_NEAR(y.a[0], 0.6, 1e-15);
  EXPECT_NEAR(y.b[1], 0.8, 1e-15);
  EXPECT_EQ(y.P[0], 1.0);
  EXPECT_EQ(y.I, 10.0);
  EXPECT_EQ(y.T, -1.0);  // frozen
  EXPECT_TRUE(act.amplitudes && act.strength && act.inertia);
  EXPECT_FALSE(act.temperature);
  EXPECT_LT(constraint_residual(y, c), 1e-15);
  ProjectionActivity again;
  project(y, c, &again);
  EXPECT_FALSE(again.strength || again.inertia);
}
