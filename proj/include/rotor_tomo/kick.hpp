#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "rotor_tomo/basis.hpp"
#include "rotor_tomo/errors.hpp"
#include "rotor_tomo/operators.hpp"
#include "rotor_tomo/partition.hpp"

namespace rotor_tomo {

/// Population allowed to leave the basis when a source state is kicked.
inline constexpr double kLeakageTolerance = 1e-8;

/// Extra rotational quanta used when exponentiating the coupling: max(8, ceil(P)).
inline int kick_padding(double strength) {
  return std::max(8, static_cast<int>(std::ceil(std::abs(strength))));
}

/// Impulsive kick V(P) = exp(i P C) truncated to a basis, with dV/dP.
struct KickOperator {
  RotorBasis basis;
  double strength = 0.0;
  Polarization polarization;
  BlockMatrix V;
  BlockMatrix dV_dP;
  /// Largest population pushed beyond j_max from any checked source column.
  double leakage = 0.0;
};

/// Eigendecomposition of the padded cos^2 coupling for one polarization. V(P) for any
/// |P| <= max_strength reuses it, which is what the optimizer does when P is free.
class KickGenerator {
 public:
  KickGenerator(const RotorBasis& basis, const Polarization& pol, double max_strength)
      : basis_(basis),
        pol_(pol),
        max_strength_(std::abs(max_strength)),
        padded_(basis.j_max() + kick_padding(max_strength), basis.parity()) {
    const HermitianOperator coupling = cos2_operator(padded_, pol);
    Partition::Builder builder(padded_.size());
    builder.add_pattern(coupling.matrix());
    padded_partition_ = builder.build();

    const auto inner = static_cast<Eigen::Index>(basis_.size());
    std::vector<std::vector<Eigen::Index>> inner_sectors;
    for (const auto& sector : padded_partition_.sectors()) {
      const Eigen::MatrixXcd block = restrict_to(coupling.matrix(), sector);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> solver(block);
      if (solver.info() != Eigen::Success) throw NumericalError("eigendecomposition of the kick coupling failed");
      SectorData data{solver.eigenvectors(), solver.eigenvalues(), 0};
      // The inner basis is a prefix of the padded one, so inner indices come first.
      std::vector<Eigen::Index> inner_idx;
      for (auto i : sector) {
        if (i < inner) inner_idx.push_back(i);
      }
      data.inner_count = static_cast<Eigen::Index>(inner_idx.size());
      if (!inner_idx.empty()) {
        inner_sectors.push_back(std::move(inner_idx));
        sectors_.push_back(std::move(data));
      }
    }
    inner_partition_ = Partition::from_sectors(basis_.size(), std::move(inner_sectors));
  }

  const RotorBasis& basis() const { return basis_; }
  const RotorBasis& padded_basis() const { return padded_; }
  const Partition& partition() const { return inner_partition_; }
  double max_strength() const { return max_strength_; }

  /// Builds V(P). Columns with J <= source_j_max are checked for leakage past j_max.
  KickOperator operator()(double strength, std::optional<int> source_j_max = std::nullopt) const {
    if (!std::isfinite(strength)) throw InputError("kick strength must be finite");
    if (std::abs(strength) > max_strength_ * (1.0 + 1e-12) + 1e-12) {
      throw InputError("kick strength exceeds the range this generator was padded for");
    }
    std::vector<Eigen::MatrixXcd> v_blocks;
    std::vector<Eigen::MatrixXcd> d_blocks;
    double leakage = 0.0;
    for (std::size_t s = 0; s < sectors_.size(); ++s) {
      const auto& data = sectors_[s];
      const Eigen::Index n = data.inner_count;
      Eigen::VectorXcd phase(data.values.size());
      for (Eigen::Index k = 0; k < phase.size(); ++k) phase[k] = std::polar(1.0, strength * data.values[k]);
      const Eigen::MatrixXcd top = data.vectors.topRows(n);
      const Eigen::MatrixXcd right = phase.asDiagonal() * top.adjoint();
      const Eigen::MatrixXcd full_cols = data.vectors * right;  // padded rows, inner columns
      v_blocks.push_back(full_cols.topRows(n));
      const Eigen::VectorXcd dphase = (cd(0.0, 1.0) * data.values.cast<cd>()).cwiseProduct(phase);
      d_blocks.push_back(top * dphase.asDiagonal() * top.adjoint());
      if (source_j_max) {
        const auto& idx = inner_partition_.sector(s);
        for (Eigen::Index c = 0; c < n; ++c) {
          if (basis_.state(static_cast<std::size_t>(idx[static_cast<std::size_t>(c)])).J > *source_j_max) continue;
          const double lost = full_cols.col(c).bottomRows(full_cols.rows() - n).squaredNorm();
          leakage = std::max(leakage, lost);
        }
      }
    }
    if (leakage > kLeakageTolerance) {
      throw ConvergenceError("kick with P=" + std::to_string(strength) + " pushes population " +
                             std::to_string(leakage) + " beyond j_max=" + std::to_string(basis_.j_max()) +
                             "; enlarge the basis");
    }
    return KickOperator{basis_, strength, pol_, BlockMatrix(inner_partition_, std::move(v_blocks)),
                        BlockMatrix(inner_partition_, std::move(d_blocks)), leakage};
  }

 private:
  struct SectorData {
    Eigen::MatrixXcd vectors;
    Eigen::VectorXd values;
    Eigen::Index inner_count;
  };

  RotorBasis basis_;
  Polarization pol_;
  double max_strength_;
  RotorBasis padded_;
  Partition padded_partition_;
  Partition inner_partition_;
  std::vector<SectorData> sectors_;
};

/// V(P) on `basis`; leakage is checked for source states with J <= source_j_max.
inline KickOperator build_kick(const RotorBasis& basis, double strength, const Polarization& pol,
                               std::optional<int> source_j_max = 0) {
  return KickGenerator(basis, pol, strength)(strength, source_j_max);
}

struct KickStage {
  KickOperator kick;
  /// Free evolution before this kick, atomic units. Ignored for the first stage.
  double delay = 0.0;
};

/// Total preparation V_n U(tau_n) ... U(tau_2) V_1 and its derivative with respect to each P_k.
struct Preparation {
  BlockMatrix total;
  std::vector<BlockMatrix> d_total_dP;
};

inline Partition joint_partition(const std::vector<const Partition*>& parts, std::size_t dim) {
  Partition::Builder builder(dim);
  for (const auto* p : parts) builder.add_partition(*p);
  return builder.build();
}

inline Preparation compose_preparation_with_derivatives(const std::vector<KickStage>& stages, const Spectrum& spectrum,
                                                        std::optional<int> source_j_max = std::nullopt) {
  if (stages.empty()) throw InputError("preparation needs at least one kick");
  std::vector<const Partition*> parts;
  for (const auto& st : stages) {
    if (!(st.kick.basis == spectrum.basis)) throw InputError("kick and spectrum bases differ");
    if (!(st.delay >= 0.0) || !std::isfinite(st.delay)) throw InputError("kick delays must be finite and non-negative");
    parts.push_back(&st.kick.V.partition());
  }
  const Partition common = joint_partition(parts, spectrum.basis.size());

  std::vector<BlockMatrix> v, dv, u;
  for (const auto& st : stages) {
    v.push_back(st.kick.V.regroup(common));
    dv.push_back(st.kick.dV_dP.regroup(common));
    u.push_back(BlockMatrix::diagonal(propagator_phases(spectrum.energies, st.delay), common));
  }
  // factor k of the product is V_k U(tau_k); the first stage has no free evolution before it
  const auto factor = [&](std::size_t k, bool derivative) {
    const BlockMatrix& kick = derivative ? dv[k] : v[k];
    return k == 0 ? kick : kick * u[k];
  };
  Preparation prep;
  prep.total = factor(0, false);
  for (std::size_t k = 1; k < stages.size(); ++k) prep.total = factor(k, false) * prep.total;
  for (std::size_t target = 0; target < stages.size(); ++target) {
    BlockMatrix acc = factor(0, target == 0);
    for (std::size_t k = 1; k < stages.size(); ++k) acc = factor(k, target == k) * acc;
    prep.d_total_dP.push_back(std::move(acc));
  }

  if (source_j_max) {
    for (std::size_t s = 0; s < common.count(); ++s) {
      const auto& idx = common.sector(s);
      for (std::size_t c = 0; c < idx.size(); ++c) {
        if (spectrum.basis.state(static_cast<std::size_t>(idx[c])).J > *source_j_max) continue;
        const double lost = 1.0 - prep.total.block(s).col(static_cast<Eigen::Index>(c)).squaredNorm();
        if (lost > kLeakageTolerance) {
          throw ConvergenceError("pulse sequence pushes population " + std::to_string(lost) +
                                 " beyond j_max=" + std::to_string(spectrum.basis.j_max()) + "; enlarge the basis");
        }
      }
    }
  }
  return prep;
}

inline BlockMatrix compose_preparation(const std::vector<KickStage>& stages, const Spectrum& spectrum,
                                       std::optional<int> source_j_max = std::nullopt) {
  return compose_preparation_with_derivatives(stages, spectrum, source_j_max).total;
}

}  // namespace rotor_tomo
