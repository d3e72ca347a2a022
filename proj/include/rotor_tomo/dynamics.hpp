#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "rotor_tomo/basis.hpp"
#include "rotor_tomo/errors.hpp"
#include "rotor_tomo/operators.hpp"
#include "rotor_tomo/parallel.hpp"
#include "rotor_tomo/partition.hpp"
#include "rotor_tomo/rng.hpp"

namespace rotor_tomo {

struct StateVector {
  RotorBasis basis;
  Eigen::VectorXcd amplitudes;
  bool normalized = true;

  static StateVector basis_state(const RotorBasis& basis, int J, int M) {
    Eigen::VectorXcd c = Eigen::VectorXcd::Zero(static_cast<Eigen::Index>(basis.size()));
    c[static_cast<Eigen::Index>(basis.index(J, M))] = 1.0;
    return {basis, c, true};
  }

  void validate() const {
    if (amplitudes.size() != static_cast<Eigen::Index>(basis.size())) throw InputError("state vector length does not match basis");
    if (!amplitudes.allFinite()) throw InputError("state vector has non-finite amplitudes");
    if (normalized && std::abs(amplitudes.norm() - 1.0) > 1e-10) throw InputError("state vector flagged normalized has norm != 1");
  }
};

struct Ensemble {
  std::vector<StateVector> members;
  std::vector<double> probabilities;

  void validate() const {
    if (members.empty() || members.size() != probabilities.size()) throw InputError("ensemble needs one probability per member");
    double total = 0.0;
    for (std::size_t j = 0; j < members.size(); ++j) {
      members[j].validate();
      if (!members[j].normalized) throw InputError("ensemble members must be normalized");
      if (!(members[j].basis == members[0].basis)) throw InputError("ensemble members live in different bases");
      if (!(probabilities[j] >= 0.0)) throw InputError("ensemble probabilities must be non-negative");
      total += probabilities[j];
    }
    if (std::abs(total - 1.0) > 1e-12) throw InputError("ensemble probabilities must sum to 1");
  }
};

struct Trajectory {
  ObservableKind kind = ObservableKind::cos2_theta;
  Eigen::VectorXd times;
  Eigen::VectorXd values;
  double noise_sigma = 0.0;
  double noise_level = 0.0;
  std::uint64_t noise_seed = 0;

  Eigen::Index size() const { return times.size(); }

  void validate() const {
    if (times.size() != values.size()) throw InputError("trajectory times and values differ in length");
    if (times.size() == 0) throw InputError("trajectory is empty");
    for (Eigen::Index c = 1; c < times.size(); ++c) {
      if (!(times[c] > times[c - 1])) throw InputError("trajectory times must be strictly increasing");
    }
    if (!times.allFinite() || !values.allFinite()) throw InputError("trajectory has non-finite entries");
  }
};

struct RpwfSample {
  Eigen::VectorXd phases;
  std::uint64_t seed = 0;
  std::uint64_t index = 0;
  Eigen::VectorXcd state;
};

/// K uniform samples t_c = c * span / K, c = 0..K-1.
inline Eigen::VectorXd uniform_time_grid(Eigen::Index count, double span) {
  if (count < 1) throw InputError("time grid needs at least one point");
  if (!(span > 0.0) || !std::isfinite(span)) throw InputError("time span must be positive");
  Eigen::VectorXd t(count);
  for (Eigen::Index c = 0; c < count; ++c) t[c] = static_cast<double>(c) * span / static_cast<double>(count);
  return t;
}

/// Revival period of an even-J wave packet, 2 pi I.
inline double revival_period(double moment_of_inertia) { return 2.0 * std::numbers::pi * moment_of_inertia; }

/// Sector-resolved evaluator of <psi|U(t)^+ O U(t)|psi> for a fixed set of observables and a
/// shared time grid. Observables never couple sectors, so every state is handled one sector
/// at a time with phases U(t) tabulated per sector.
class SignalEngine {
 public:
  SignalEngine(const RotorBasis& basis, const std::vector<HermitianOperator>& observables, Eigen::VectorXd times)
      : basis_(basis), times_(std::move(times)) {
    if (observables.empty()) throw InputError("at least one observable is required");
    Partition::Builder builder(basis.size());
    for (const auto& o : observables) {
      if (!(o.basis() == basis)) throw InputError("observable and engine bases differ");
      builder.add_pattern(o.matrix());
    }
    partition_ = builder.build();
    for (const auto& idx : partition_.sectors()) {
      Sector s;
      s.idx = idx;
      for (const auto& o : observables) s.ops.push_back(restrict_to(o.matrix(), idx).sparseView(1e-300, 1.0));
      sectors_.push_back(std::move(s));
    }
    for (Eigen::Index c = 1; c < times_.size(); ++c) {
      if (!(times_[c] > times_[c - 1])) throw InputError("times must be strictly increasing");
    }
  }

  const RotorBasis& basis() const { return basis_; }
  const Partition& partition() const { return partition_; }
  const Eigen::VectorXd& times() const { return times_; }
  Eigen::Index observable_count() const { return static_cast<Eigen::Index>(sectors_.empty() ? 0 : sectors_[0].ops.size()); }

  void set_spectrum(const Spectrum& spectrum) {
    if (!(spectrum.basis == basis_)) throw InputError("spectrum and engine bases differ");
    const Eigen::Index k = times_.size();
    for (auto& s : sectors_) {
      const auto n = static_cast<Eigen::Index>(s.idx.size());
      s.phases.resize(n, k);
      s.dh_dI.resize(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double h = spectrum.energies[s.idx[static_cast<std::size_t>(i)]];
        s.dh_dI[i] = spectrum.energy_derivative[s.idx[static_cast<std::size_t>(i)]];
        for (Eigen::Index c = 0; c < k; ++c) s.phases(i, c) = std::polar(1.0, -h * times_[c]);
      }
    }
    has_spectrum_ = true;
  }

  /// K x n_obs matrix of expectation values.
  Eigen::MatrixXd traces(const Eigen::VectorXcd& psi) const {
    require_ready(psi);
    const Eigen::Index k = times_.size();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(k, observable_count());
    for (const auto& s : sectors_) {
      const Eigen::VectorXcd part = gather(psi, s.idx);
      const double weight = part.squaredNorm();
      if (weight == 0.0) continue;
      for (Eigen::Index c = 0; c < k; ++c) {
        const Eigen::VectorXcd phi = part.cwiseProduct(s.phases.col(c));
        for (std::size_t o = 0; o < s.ops.size(); ++o) {
          const cd v = phi.dot(s.ops[o] * phi);
          if (std::abs(v.imag()) > 1e-12 * std::max(1.0, weight)) throw NumericalError("expectation value has an imaginary part");
          out(c, static_cast<Eigen::Index>(o)) += v.real();
        }
      }
    }
    return out;
  }

  struct Backward {
    /// sum_c sum_o coef(c,o) B_o(t_c) psi with B = U^+ O U
    Eigen::VectorXcd g;
    /// sum_c sum_o coef(c,o) d<O_o>(t_c)/dI
    double d_inertia = 0.0;
  };

  Backward backward(const Eigen::VectorXcd& psi, const Eigen::MatrixXd& coef, bool want_g, bool want_inertia) const {
    require_ready(psi);
    if (coef.rows() != times_.size() || coef.cols() != observable_count()) throw InputError("coefficient matrix has the wrong shape");
    Backward out;
    out.g = Eigen::VectorXcd::Zero(psi.size());
    const Eigen::Index k = times_.size();
    for (const auto& s : sectors_) {
      const Eigen::VectorXcd part = gather(psi, s.idx);
      if (part.squaredNorm() == 0.0) continue;
      Eigen::VectorXcd acc = Eigen::VectorXcd::Zero(part.size());
      for (Eigen::Index c = 0; c < k; ++c) {
        const Eigen::VectorXcd phi = part.cwiseProduct(s.phases.col(c));
        Eigen::VectorXcd w = Eigen::VectorXcd::Zero(part.size());
        bool any = false;
        for (std::size_t o = 0; o < s.ops.size(); ++o) {
          const double a = coef(c, static_cast<Eigen::Index>(o));
          if (a == 0.0) continue;
          w += a * (s.ops[o] * phi);
          any = true;
        }
        if (!any) continue;
        if (want_g) acc += s.phases.col(c).conjugate().cwiseProduct(w);
        if (want_inertia) {
          // d<O>/dh_n = -2 t Im(conj(phi_n) (O phi)_n)
          double dh = 0.0;
          for (Eigen::Index i = 0; i < part.size(); ++i) dh += s.dh_dI[i] * std::imag(std::conj(phi[i]) * w[i]);
          out.d_inertia += -2.0 * times_[c] * dh;
        }
      }
      if (want_g) scatter_add(out.g, s.idx, acc);
    }
    return out;
  }

 private:
  struct Sector {
    std::vector<Eigen::Index> idx;
    std::vector<SparseMatrixC> ops;
    Eigen::MatrixXcd phases;
    Eigen::VectorXd dh_dI;
  };

  void require_ready(const Eigen::VectorXcd& psi) const {
    if (!has_spectrum_) throw ConfigurationError("signal engine has no spectrum");
    if (psi.size() != static_cast<Eigen::Index>(basis_.size())) throw InputError("state length does not match the engine basis");
  }

  RotorBasis basis_;
  Eigen::VectorXd times_;
  Partition partition_;
  std::vector<Sector> sectors_;
  bool has_spectrum_ = false;
};

inline SignalEngine make_engine(const Spectrum& spectrum, const HermitianOperator& O, const Eigen::VectorXd& times) {
  if (!(O.basis() == spectrum.basis)) throw InputError("operator and spectrum bases differ");
  SignalEngine engine(spectrum.basis, {O}, times);
  engine.set_spectrum(spectrum);
  return engine;
}

/// <psi|U^+(t_c) O U(t_c)|psi> at every time.
inline Eigen::VectorXd propagate_expectation(const StateVector& psi, const Spectrum& spectrum, const HermitianOperator& O,
                                             const Eigen::VectorXd& times) {
  psi.validate();
  if (!(psi.basis == spectrum.basis)) throw InputError("state and spectrum bases differ");
  return make_engine(spectrum, O, times).traces(psi.amplitudes).col(0);
}

/// Weighted sum of member expectation traces; the sum runs in member order.
inline Eigen::VectorXd ensemble_signal(const Ensemble& ens, const Spectrum& spectrum, const HermitianOperator& O,
                                       const Eigen::VectorXd& times) {
  ens.validate();
  if (!(ens.members[0].basis == spectrum.basis)) throw InputError("ensemble and spectrum bases differ");
  const SignalEngine engine = make_engine(spectrum, O, times);
  std::vector<Eigen::VectorXd> parts(ens.members.size());
  parallel_for(ens.members.size(), [&](std::size_t j) {
    parts[j] = ens.probabilities[j] == 0.0 ? Eigen::VectorXd::Zero(times.size())
                                          : Eigen::VectorXd(engine.traces(ens.members[j].amplitudes).col(0));
  });
  Eigen::VectorXd out = Eigen::VectorXd::Zero(times.size());
  for (std::size_t j = 0; j < parts.size(); ++j) out += ens.probabilities[j] * parts[j];
  return out;
}

/// |alpha_k> with components exp(-i alpha_k^n) sqrt(p_n); p indexes the first p.size() basis states.
inline RpwfSample rpwf_sample(const Eigen::VectorXd& p, Eigen::Index dim, std::uint64_t seed, std::uint64_t k) {
  if (p.size() > dim) throw InputError("more populations than basis states");
  RpwfSample s{Eigen::VectorXd(p.size()), seed, k, Eigen::VectorXcd::Zero(dim)};
  for (Eigen::Index n = 0; n < p.size(); ++n) {
    s.phases[n] = rpwf_phase(seed, k, static_cast<std::uint64_t>(n));
    s.state[n] = std::polar(std::sqrt(std::max(p[n], 0.0)), -s.phases[n]);
  }
  return s;
}

inline void check_populations(const Eigen::VectorXd& p) {
  if (p.size() == 0) throw InputError("population vector is empty");
  if ((p.array() < 0.0).any() || !p.allFinite()) throw InputError("populations must be finite and non-negative");
  if (std::abs(p.sum() - 1.0) > 1e-10) throw InputError("populations must sum to 1");
}

/// Mean of N random-phase traces, each state prepared by `prep` and propagated freely.
inline Eigen::VectorXd rpwf_signal(const Eigen::VectorXd& p, const BlockMatrix& prep, const Spectrum& spectrum,
                                   const HermitianOperator& O, const Eigen::VectorXd& times, int samples,
                                   std::uint64_t seed) {
  check_populations(p);
  if (samples < 1) throw InputError("RPWF needs at least one sample");
  if (prep.dim() != spectrum.basis.size()) throw InputError("preparation and spectrum dimensions differ");
  const SignalEngine engine = make_engine(spectrum, O, times);
  const auto d = static_cast<Eigen::Index>(spectrum.basis.size());
  std::vector<Eigen::VectorXd> parts(static_cast<std::size_t>(samples));
  parallel_for(parts.size(), [&](std::size_t k) {
    const RpwfSample s = rpwf_sample(p, d, seed, k);
    parts[k] = engine.traces(prep.apply(s.state)).col(0);
  });
  Eigen::VectorXd out = Eigen::VectorXd::Zero(times.size());
  for (const auto& part : parts) out += part;
  return out / static_cast<double>(samples);
}

inline double sample_std(const Eigen::VectorXd& v) {
  if (v.size() < 2) return 0.0;
  const double mean = v.mean();
  return std::sqrt((v.array() - mean).square().sum() / static_cast<double>(v.size() - 1));
}

/// Additive i.i.d. Gaussian noise with sigma = level * std(values).
inline Trajectory add_noise(const Trajectory& traj, double level, std::uint64_t seed) {
  if (!(level >= 0.0) || !std::isfinite(level)) throw InputError("noise level must be non-negative");
  Trajectory out = traj;
  out.noise_level = level;
  out.noise_seed = seed;
  out.noise_sigma = level * sample_std(traj.values);
  if (out.noise_sigma == 0.0) return out;
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, out.noise_sigma);
  for (Eigen::Index c = 0; c < out.values.size(); ++c) out.values[c] += normal(gen);
  return out;
}

}  // namespace rotor_tomo
