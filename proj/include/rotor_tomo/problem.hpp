#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rotor_tomo/basis.hpp"
#include "rotor_tomo/dynamics.hpp"
#include "rotor_tomo/errors.hpp"
#include "rotor_tomo/kick.hpp"
#include "rotor_tomo/operators.hpp"
#include "rotor_tomo/parallel.hpp"
#include "rotor_tomo/quadratic_form.hpp"
#include "rotor_tomo/rng.hpp"
#include "rotor_tomo/thermal.hpp"

namespace rotor_tomo {

enum class ParameterBlock { a, b, p, P, I, T };

inline std::string_view to_string(ParameterBlock b) {
  switch (b) {
    case ParameterBlock::a: return "a";
    case ParameterBlock::b: return "b";
    case ParameterBlock::p: return "p";
    case ParameterBlock::P: return "P";
    case ParameterBlock::I: return "I";
    case ParameterBlock::T: return "T";
  }
  return "?";
}

inline ParameterBlock parse_block(std::string_view s) {
  for (auto b : {ParameterBlock::a, ParameterBlock::b, ParameterBlock::p, ParameterBlock::P, ParameterBlock::I, ParameterBlock::T}) {
    if (s == to_string(b)) return b;
  }
  throw InputError("unknown parameter block '" + std::string(s) + "' (expected a, b, p, P, I or T)");
}

/// What the unknown state is: free amplitudes of each member, populations of fixed source
/// states, or populations slaved to a temperature.
enum class ModelMode { amplitudes, populations, temperature };

inline std::string_view to_string(ModelMode m) {
  switch (m) {
    case ModelMode::amplitudes: return "amplitudes";
    case ModelMode::populations: return "populations";
    case ModelMode::temperature: return "temperature";
  }
  return "?";
}

struct ScalarParam {
  double value = 0.0;
  bool free = false;
  double lo = 0.0;
  double hi = 0.0;
};

struct PulseSpec {
  Polarization polarization;
  ScalarParam strength;
  /// free evolution before this pulse, a.u.; ignored for the first pulse
  double delay = 0.0;
};

struct TrajectoryTerm {
  Trajectory reference;
  double weight = 1.0;
};

struct RpwfOptions {
  bool enabled = false;
  int samples = 30;
  std::uint64_t seed = 0;
};

struct ReconstructionProblem {
  RotorBasis basis;
  ModelMode mode = ModelMode::amplitudes;
  ScalarParam inertia{1.0, false, 0.0, 0.0};
  std::vector<TrajectoryTerm> trajectories;

  // amplitudes mode
  int members = 1;
  /// 1 where amplitudes may be nonzero, length basis.size(); empty means everywhere
  Eigen::VectorXd support;
  bool amplitudes_free = true;
  /// d x members; used when amplitudes are frozen
  Eigen::MatrixXcd amplitudes;
  double ridge = 0.0;

  // populations / temperature modes
  std::vector<PulseSpec> pulses;
  /// basis indices of the initial states chi_j
  std::vector<Eigen::Index> sources;
  ScalarParam temperature{0.0, false, 0.0, 0.0};
  ParityFilter thermal_parity = ParityFilter::all_J;
  RpwfOptions rpwf;

  // populations of members (amplitudes mode) or sources (populations mode)
  bool populations_free = false;
  Eigen::VectorXd populations;

  Eigen::Index dim() const { return static_cast<Eigen::Index>(basis.size()); }
  Eigen::Index population_count() const {
    return mode == ModelMode::amplitudes ? members : static_cast<Eigen::Index>(sources.size());
  }
  int source_j_max() const {
    int j = 0;
    for (auto s : sources) j = std::max(j, basis.state(static_cast<std::size_t>(s)).J);
    return j;
  }

  void validate() const {
    const auto check_box = [](const ScalarParam& s, const char* name) {
      if (!std::isfinite(s.value)) throw ConfigurationError(std::string(name) + " must be finite");
      if (s.free) {
        if (!(s.lo <= s.hi)) throw ConfigurationError(std::string(name) + " bounds are infeasible (lo > hi)");
        if (!std::isfinite(s.lo) || !std::isfinite(s.hi)) throw ConfigurationError(std::string(name) + " bounds must be finite");
      }
    };
    check_box(inertia, "moment of inertia");
    if (!(inertia.value > 0.0) || (inertia.free && !(inertia.lo > 0.0))) throw ConfigurationError("moment of inertia must be positive");
    if (trajectories.empty()) throw ConfigurationError("at least one reference trajectory is required");
    for (const auto& t : trajectories) {
      t.reference.validate();
      if (t.reference.times.size() != trajectories[0].reference.times.size() ||
          (t.reference.times - trajectories[0].reference.times).cwiseAbs().maxCoeff() > 0.0) {
        throw InputError("reference trajectories use different time grids");
      }
      if (!(t.weight >= 0.0)) throw ConfigurationError("trajectory weights must be non-negative");
    }
    if (ridge < 0.0) throw ConfigurationError("ridge weight must be non-negative");
    const auto np = population_count();
    if (mode == ModelMode::amplitudes) {
      if (members < 1) throw ConfigurationError("amplitude mode needs at least one member");
      if (support.size() != 0 && support.size() != dim()) throw ConfigurationError("support mask length does not match basis");
      if (support.size() != 0 && support.sum() < 1.0) throw ConfigurationError("support mask is empty");
      if (!amplitudes_free && (amplitudes.rows() != dim() || amplitudes.cols() != members)) {
        throw ConfigurationError("frozen amplitudes must be supplied for every member");
      }
      if (temperature.free) throw ConfigurationError("temperature is only meaningful in temperature mode");
      for (const auto& p : pulses) {
        if (p.strength.free) throw ConfigurationError("kick strengths cannot be inferred when amplitudes are free");
      }
    } else {
      if (sources.empty()) throw ConfigurationError("population modes need source states");
      for (auto s : sources) {
        if (s < 0 || s >= dim()) throw ConfigurationError("source state outside the basis");
      }
      for (std::size_t k = 0; k < pulses.size(); ++k) {
        check_box(pulses[k].strength, "kick strength");
        if (k > 0 && pulses[k].delay > 0.0 && inertia.free) {
          throw ConfigurationError("free moment of inertia with delayed pulses is not supported");
        }
        if (!(pulses[k].delay >= 0.0)) throw ConfigurationError("pulse delays must be non-negative");
      }
      if (rpwf.enabled && rpwf.samples < 1) throw ConfigurationError("RPWF needs at least one sample");
    }
    if (mode == ModelMode::temperature) {
      if (populations_free) throw ConfigurationError("temperature mode cannot be combined with free populations");
      if (inertia.free) throw ConfigurationError("free temperature with free moment of inertia is not supported");
      check_box(temperature, "temperature");
      if (!(temperature.value > 0.0) || (temperature.free && !(temperature.lo > 0.0))) {
        throw ConfigurationError("temperature must be positive");
      }
    } else if (mode == ModelMode::populations && !populations_free && populations.size() != np) {
      throw ConfigurationError("fixed populations must be supplied");
    }
    if (populations.size() != 0 && populations.size() != np) throw ConfigurationError("population vector has the wrong length");
    if (populations_free && np < 1) throw ConfigurationError("no populations to infer");
  }
};

struct ActiveMask {
  bool a = false, b = false, p = false, P = false, I = false, T = false;
  bool operator[](ParameterBlock blk) const {
    switch (blk) {
      case ParameterBlock::a: return a;
      case ParameterBlock::b: return b;
      case ParameterBlock::p: return p;
      case ParameterBlock::P: return P;
      case ParameterBlock::I: return I;
      case ParameterBlock::T: return T;
    }
    return false;
  }
};

struct ParameterVector {
  /// Re and Im of the member amplitudes, member-major (member j occupies [j d, (j+1) d))
  Eigen::VectorXd a;
  Eigen::VectorXd b;
  Eigen::VectorXd p;
  Eigen::VectorXd P;
  double I = 0.0;
  double T = 0.0;
  ActiveMask active;

  Eigen::VectorXcd psi(Eigen::Index j, Eigen::Index d) const {
    Eigen::VectorXcd out(d);
    for (Eigen::Index n = 0; n < d; ++n) out[n] = cd(a[j * d + n], b[j * d + n]);
    return out;
  }
  void set_psi(Eigen::Index j, const Eigen::VectorXcd& v) {
    const Eigen::Index d = v.size();
    a.segment(j * d, d) = v.real();
    b.segment(j * d, d) = v.imag();
  }

  Eigen::VectorXd block(ParameterBlock blk) const {
    switch (blk) {
      case ParameterBlock::a: return a;
      case ParameterBlock::b: return b;
      case ParameterBlock::p: return p;
      case ParameterBlock::P: return P;
      case ParameterBlock::I: return Eigen::VectorXd::Constant(1, I);
      case ParameterBlock::T: return Eigen::VectorXd::Constant(1, T);
    }
    return {};
  }
  void set_block(ParameterBlock blk, const Eigen::VectorXd& v) {
    switch (blk) {
      case ParameterBlock::a: a = v; break;
      case ParameterBlock::b: b = v; break;
      case ParameterBlock::p: p = v; break;
      case ParameterBlock::P: P = v; break;
      case ParameterBlock::I: I = v[0]; break;
      case ParameterBlock::T: T = v[0]; break;
    }
  }
};

/// Known values plus guesses for the unknowns; amplitudes start at the frozen values (or zero).
inline ParameterVector nominal_parameters(const ReconstructionProblem& pr) {
  ParameterVector x;
  const Eigen::Index d = pr.dim();
  x.I = pr.inertia.value;
  x.T = pr.temperature.value;
  x.P.resize(static_cast<Eigen::Index>(pr.pulses.size()));
  for (std::size_t k = 0; k < pr.pulses.size(); ++k) x.P[static_cast<Eigen::Index>(k)] = pr.pulses[k].strength.value;
  if (pr.mode == ModelMode::amplitudes) {
    x.a = Eigen::VectorXd::Zero(d * pr.members);
    x.b = Eigen::VectorXd::Zero(d * pr.members);
    if (pr.amplitudes.rows() == d && pr.amplitudes.cols() == pr.members) {
      for (Eigen::Index j = 0; j < pr.members; ++j) x.set_psi(j, pr.amplitudes.col(j));
    }
  }
  const auto np = pr.population_count();
  if (pr.populations.size() == np) {
    x.p = pr.populations;
  } else {
    x.p = Eigen::VectorXd::Constant(np, 1.0 / static_cast<double>(np));
  }
  x.active.a = x.active.b = pr.mode == ModelMode::amplitudes && pr.amplitudes_free;
  x.active.p = pr.populations_free;
  x.active.I = pr.inertia.free;
  x.active.T = pr.mode == ModelMode::temperature && pr.temperature.free;
  x.active.P = pr.mode != ModelMode::amplitudes &&
               std::any_of(pr.pulses.begin(), pr.pulses.end(), [](const PulseSpec& s) { return s.strength.free; });
  return x;
}

struct GradientBundle {
  double E = 0.0;
  /// E without the ridge term
  double misfit = 0.0;
  Eigen::VectorXd dE_da, dE_db, dE_dp, dE_dP;
  double dE_dI = 0.0;
  double dE_dT = 0.0;
  ActiveMask active;
  /// model minus reference, one column per trajectory
  Eigen::MatrixXd residuals;
  Eigen::MatrixXd model;

  Eigen::VectorXd block(ParameterBlock blk) const {
    switch (blk) {
      case ParameterBlock::a: return dE_da;
      case ParameterBlock::b: return dE_db;
      case ParameterBlock::p: return dE_dp;
      case ParameterBlock::P: return dE_dP;
      case ParameterBlock::I: return Eigen::VectorXd::Constant(1, dE_dI);
      case ParameterBlock::T: return Eigen::VectorXd::Constant(1, dE_dT);
    }
    return {};
  }
};

/// Column j of a block matrix as a full vector.
inline Eigen::VectorXcd block_column(const BlockMatrix& m, Eigen::Index j) {
  const auto& p = m.partition();
  const std::size_t s = p.sector_of(static_cast<std::size_t>(j));
  const auto& idx = p.sector(s);
  const auto pos = std::lower_bound(idx.begin(), idx.end(), j) - idx.begin();
  Eigen::VectorXcd out = Eigen::VectorXcd::Zero(static_cast<Eigen::Index>(m.dim()));
  for (std::size_t r = 0; r < idx.size(); ++r) out[idx[r]] = m.block(s)(static_cast<Eigen::Index>(r), pos);
  return out;
}

/// Objective E = sum_traj w sum_c (O(t_c) - O_ref(t_c))^2 + lambda sum_j |psi_j|^2 and its gradients.
/// Holds caches keyed on I and P; a single Evaluator must not be shared by concurrent callers.
class Evaluator {
 public:
  explicit Evaluator(ReconstructionProblem problem) : pr_(std::move(problem)) {
    pr_.validate();
    times_ = pr_.trajectories[0].reference.times;
    for (const auto& t : pr_.trajectories) ops_.push_back(observable_operator(pr_.basis, t.reference.kind));
    refs_.resize(times_.size(), static_cast<Eigen::Index>(pr_.trajectories.size()));
    weights_.resize(static_cast<Eigen::Index>(pr_.trajectories.size()));
    for (std::size_t o = 0; o < pr_.trajectories.size(); ++o) {
      refs_.col(static_cast<Eigen::Index>(o)) = pr_.trajectories[o].reference.values;
      weights_[static_cast<Eigen::Index>(o)] = pr_.trajectories[o].weight;
    }
    if (pr_.mode != ModelMode::amplitudes) {
      source_j_max_ = pr_.source_j_max();
      for (const auto& pulse : pr_.pulses) {
        const double reach = pulse.strength.free ? std::max(std::abs(pulse.strength.lo), std::abs(pulse.strength.hi))
                                                 : std::abs(pulse.strength.value);
        generators_.emplace_back(pr_.basis, pulse.polarization, std::max(reach, std::abs(pulse.strength.value)));
      }
      if (pr_.mode == ModelMode::temperature) {
        mask_ = Eigen::VectorXd(static_cast<Eigen::Index>(pr_.sources.size()));
        for (std::size_t j = 0; j < pr_.sources.size(); ++j) {
          const int J = pr_.basis.state(static_cast<std::size_t>(pr_.sources[j])).J;
          mask_[static_cast<Eigen::Index>(j)] = (pr_.thermal_parity == ParityFilter::even_J_only && J % 2) ? 0.0 : 1.0;
        }
      }
    }
  }

  const ReconstructionProblem& problem() const { return pr_; }
  const Eigen::VectorXd& times() const { return times_; }

  /// p(T) over the sources at temperature T.
  ThermalModel thermal(double T) const {
    Eigen::VectorXd h(static_cast<Eigen::Index>(pr_.sources.size()));
    for (std::size_t j = 0; j < pr_.sources.size(); ++j) {
      const double J = pr_.basis.state(static_cast<std::size_t>(pr_.sources[j])).J;
      h[static_cast<Eigen::Index>(j)] = J * (J + 1.0) / (2.0 * pr_.inertia.value);
    }
    return thermal_model(h, T, mask_);
  }

  /// Populations the model actually uses (p(T) in temperature mode).
  Eigen::VectorXd effective_populations(const ParameterVector& x) const {
    return pr_.mode == ModelMode::temperature ? thermal(x.T).populations : x.p;
  }

  double objective(const ParameterVector& x) const { return evaluate(x, false).E; }

  GradientBundle evaluate(const ParameterVector& x, bool gradients = true) const {
    check_shapes(x);
    GradientBundle g;
    g.active = x.active;
    switch (pr_.mode) {
      case ModelMode::amplitudes: evaluate_amplitudes(x, gradients, g); break;
      case ModelMode::populations:
      case ModelMode::temperature:
        if (pr_.rpwf.enabled) {
          evaluate_rpwf(x, gradients, g);
        } else {
          evaluate_exact(x, gradients, g);
        }
        break;
    }
    if (!std::isfinite(g.E)) throw NumericalError("objective is not finite");
    return g;
  }

  /// Model trajectories, one column per reference trajectory.
  Eigen::MatrixXd model_signals(const ParameterVector& x) const { return evaluate(x, false).model; }

  /// Preparation V_total and dV_total/dP_k at the given strengths.
  const Preparation& preparation(const Eigen::VectorXd& P, double I) const {
    if (prep_cache_ && prep_P_.size() == P.size() && (prep_P_ - P).cwiseAbs().maxCoeff() == 0.0 && prep_I_ == I) return *prep_cache_;
    if (pr_.pulses.empty()) {
      const Partition singles = Partition::singletons(pr_.basis.size());
      prep_cache_ = Preparation{BlockMatrix::identity(singles), {}};
    } else {
      std::vector<KickStage> stages;
      for (std::size_t k = 0; k < pr_.pulses.size(); ++k) {
        stages.push_back({generators_[k](P[static_cast<Eigen::Index>(k)], source_j_max_), pr_.pulses[k].delay});
      }
      prep_cache_ = compose_preparation_with_derivatives(stages, build_spectrum(pr_.basis, I), source_j_max_);
    }
    prep_P_ = P;
    prep_I_ = I;
    return *prep_cache_;
  }

  const SignalEngine& engine(double I) const {
    if (!engine_) engine_.emplace(pr_.basis, ops_, times_);
    if (engine_I_ != I) {
      engine_->set_spectrum(build_spectrum(pr_.basis, I));
      engine_I_ = I;
    }
    return *engine_;
  }

 private:
  void check_shapes(const ParameterVector& x) const {
    const auto np = pr_.population_count();
    if (x.p.size() != np) throw InputError("population vector has the wrong length");
    if (x.P.size() != static_cast<Eigen::Index>(pr_.pulses.size())) throw InputError("kick strength vector has the wrong length");
    if (pr_.mode == ModelMode::amplitudes && (x.a.size() != pr_.dim() * pr_.members || x.b.size() != x.a.size())) {
      throw InputError("amplitude vectors have the wrong length");
    }
    if (!(x.I > 0.0)) throw InputError("moment of inertia must be positive");
    if (pr_.mode == ModelMode::temperature && !(x.T > 0.0)) throw InputError("temperature must be positive");
  }

  void finish_misfit(const Eigen::MatrixXd& model, GradientBundle& g, Eigen::MatrixXd& coef) const {
    g.model = model;
    g.residuals = model - refs_;
    g.misfit = 0.0;
    for (Eigen::Index o = 0; o < refs_.cols(); ++o) g.misfit += weights_[o] * g.residuals.col(o).squaredNorm();
    g.E = g.misfit;
    coef = 2.0 * g.residuals * weights_.asDiagonal();
  }

  void evaluate_amplitudes(const ParameterVector& x, bool gradients, GradientBundle& g) const {
    const Eigen::Index d = pr_.dim();
    const auto m = static_cast<std::size_t>(pr_.members);
    const SignalEngine& eng = engine(x.I);
    std::vector<Eigen::VectorXcd> psi(m);
    for (std::size_t j = 0; j < m; ++j) psi[j] = x.psi(static_cast<Eigen::Index>(j), d);
    std::vector<Eigen::MatrixXd> tr(m);
    parallel_for(m, [&](std::size_t j) { tr[j] = eng.traces(psi[j]); });
    Eigen::MatrixXd model = Eigen::MatrixXd::Zero(times_.size(), refs_.cols());
    for (std::size_t j = 0; j < m; ++j) model += x.p[static_cast<Eigen::Index>(j)] * tr[j];
    Eigen::MatrixXd coef;
    finish_misfit(model, g, coef);
    double norm2 = 0.0;
    for (const auto& v : psi) norm2 += v.squaredNorm();
    g.E += pr_.ridge * norm2;
    if (!gradients) return;

    g.dE_dp = Eigen::VectorXd::Zero(pr_.members);
    for (std::size_t j = 0; j < m; ++j) g.dE_dp[static_cast<Eigen::Index>(j)] = coef.cwiseProduct(tr[j]).sum();
    g.dE_da = 2.0 * pr_.ridge * x.a;
    g.dE_db = 2.0 * pr_.ridge * x.b;
    g.dE_dP = Eigen::VectorXd::Zero(x.P.size());
    std::vector<SignalEngine::Backward> back(m);
    parallel_for(m, [&](std::size_t j) { back[j] = eng.backward(psi[j], coef, true, x.active.I); });
    for (std::size_t j = 0; j < m; ++j) {
      const double w = x.p[static_cast<Eigen::Index>(j)];
      const auto jj = static_cast<Eigen::Index>(j);
      g.dE_da.segment(jj * d, d) += 2.0 * w * back[j].g.real();
      g.dE_db.segment(jj * d, d) += 2.0 * w * back[j].g.imag();
      g.dE_dI += w * back[j].d_inertia;
    }
  }

  // Member traces only depend on (P, I); population and temperature steps reuse them.
  const std::vector<Eigen::MatrixXd>& exact_traces(const ParameterVector& x, const Preparation& prep) const {
    if (trace_cache_ && trace_I_ == x.I && trace_P_.size() == x.P.size() && (trace_P_ - x.P).cwiseAbs().maxCoeff() == 0.0) {
      return *trace_cache_;
    }
    const SignalEngine& eng = engine(x.I);
    std::vector<Eigen::MatrixXd> tr(pr_.sources.size());
    parallel_for(tr.size(), [&](std::size_t j) { tr[j] = eng.traces(block_column(prep.total, pr_.sources[j])); });
    trace_cache_ = std::move(tr);
    trace_P_ = x.P;
    trace_I_ = x.I;
    return *trace_cache_;
  }

  void evaluate_exact(const ParameterVector& x, bool gradients, GradientBundle& g) const {
    const Preparation& prep = preparation(x.P, x.I);
    const std::vector<Eigen::MatrixXd>& tr = exact_traces(x, prep);
    std::optional<ThermalModel> thermal_p;
    if (pr_.mode == ModelMode::temperature) thermal_p = thermal(x.T);
    const Eigen::VectorXd& p = thermal_p ? thermal_p->populations : x.p;
    Eigen::MatrixXd model = Eigen::MatrixXd::Zero(times_.size(), refs_.cols());
    for (std::size_t j = 0; j < tr.size(); ++j) {
      if (p[static_cast<Eigen::Index>(j)] != 0.0) model += p[static_cast<Eigen::Index>(j)] * tr[j];
    }
    Eigen::MatrixXd coef;
    finish_misfit(model, g, coef);
    if (!gradients) return;

    const auto np = static_cast<Eigen::Index>(tr.size());
    g.dE_dp = Eigen::VectorXd(np);
    for (Eigen::Index j = 0; j < np; ++j) g.dE_dp[j] = coef.cwiseProduct(tr[static_cast<std::size_t>(j)]).sum();
    if (thermal_p) g.dE_dT = grad_temperature(g.dE_dp, *thermal_p);
    g.dE_dP = Eigen::VectorXd::Zero(x.P.size());
    if (x.active.P || x.active.I) {
      const SignalEngine& eng = engine(x.I);
      std::vector<double> d_inertia(tr.size(), 0.0);
      std::vector<Eigen::VectorXd> d_strength(tr.size(), Eigen::VectorXd::Zero(x.P.size()));
      parallel_for(tr.size(), [&](std::size_t j) {
        const double w = p[static_cast<Eigen::Index>(j)];
        if (w == 0.0) return;
        const Eigen::VectorXcd psi = block_column(prep.total, pr_.sources[j]);
        const auto back = eng.backward(psi, coef, x.active.P, x.active.I);
        d_inertia[j] = w * back.d_inertia;
        if (x.active.P) {
          for (std::size_t k = 0; k < prep.d_total_dP.size(); ++k) {
            const Eigen::VectorXcd dpsi = block_column(prep.d_total_dP[k], pr_.sources[j]);
            d_strength[j][static_cast<Eigen::Index>(k)] = 2.0 * w * back.g.dot(dpsi).real();
          }
        }
      });
      for (std::size_t j = 0; j < tr.size(); ++j) {
        g.dE_dI += d_inertia[j];
        g.dE_dP += d_strength[j];
      }
    }
  }

  void evaluate_rpwf(const ParameterVector& x, bool gradients, GradientBundle& g) const {
    const Preparation& prep = preparation(x.P, x.I);
    const SignalEngine& eng = engine(x.I);
    std::optional<ThermalModel> thermal_p;
    if (pr_.mode == ModelMode::temperature) thermal_p = thermal(x.T);
    const Eigen::VectorXd& p = thermal_p ? thermal_p->populations : x.p;
    const auto n = static_cast<std::size_t>(pr_.rpwf.samples);
    const auto np = static_cast<Eigen::Index>(pr_.sources.size());
    const Eigen::Index d = pr_.dim();
    // x_k = Pi Theta_k sqrt(p): random phases on the source states
    const auto sample = [&](std::size_t k) {
      Eigen::VectorXcd v = Eigen::VectorXcd::Zero(d);
      for (Eigen::Index j = 0; j < np; ++j) {
        v[pr_.sources[static_cast<std::size_t>(j)]] =
            std::polar(std::sqrt(std::max(p[j], 0.0)), -rpwf_phase(pr_.rpwf.seed, k, static_cast<std::uint64_t>(j)));
      }
      return v;
    };
    std::vector<Eigen::MatrixXd> tr(n);
    parallel_for(n, [&](std::size_t k) { tr[k] = eng.traces(prep.total.apply(sample(k))); });
    Eigen::MatrixXd model = Eigen::MatrixXd::Zero(times_.size(), refs_.cols());
    for (const auto& t : tr) model += t;
    model /= static_cast<double>(n);
    Eigen::MatrixXd coef;
    finish_misfit(model, g, coef);
    if (!gradients) return;

    const bool want_pop = x.active.p || x.active.T;
    std::vector<Eigen::VectorXd> d_sqrt(n, Eigen::VectorXd::Zero(np));
    std::vector<Eigen::VectorXd> d_strength(n, Eigen::VectorXd::Zero(x.P.size()));
    std::vector<double> d_inertia(n, 0.0);
    parallel_for(n, [&](std::size_t k) {
      const Eigen::VectorXcd xk = sample(k);
      const auto back = eng.backward(prep.total.apply(xk), coef, want_pop || x.active.P, x.active.I);
      d_inertia[k] = back.d_inertia;
      if (want_pop) {
        const Eigen::VectorXcd vg = prep.total.apply_adjoint(back.g);
        for (Eigen::Index j = 0; j < np; ++j) {
          const cd theta = std::polar(1.0, -rpwf_phase(pr_.rpwf.seed, k, static_cast<std::uint64_t>(j)));
          d_sqrt[k][j] = 2.0 * (theta * std::conj(vg[pr_.sources[static_cast<std::size_t>(j)]])).real();
        }
      }
      if (x.active.P) {
        for (std::size_t q = 0; q < prep.d_total_dP.size(); ++q) {
          d_strength[k][static_cast<Eigen::Index>(q)] = 2.0 * back.g.dot(prep.d_total_dP[q].apply(xk)).real();
        }
      }
    });
    Eigen::VectorXd dsq = Eigen::VectorXd::Zero(np);
    g.dE_dP = Eigen::VectorXd::Zero(x.P.size());
    for (std::size_t k = 0; k < n; ++k) {
      dsq += d_sqrt[k];
      g.dE_dP += d_strength[k];
      g.dE_dI += d_inertia[k];
    }
    const double inv = 1.0 / static_cast<double>(n);
    dsq *= inv;
    g.dE_dP *= inv;
    g.dE_dI *= inv;
    // dE/dp_j = dE/dsqrt(p_j) / (2 sqrt(p_j)), with p_j floored at 1e-12
    g.dE_dp = Eigen::VectorXd(np);
    for (Eigen::Index j = 0; j < np; ++j) g.dE_dp[j] = dsq[j] / (2.0 * std::sqrt(std::max(p[j], kPopulationFloor)));
    if (thermal_p) g.dE_dT = grad_temperature(g.dE_dp, *thermal_p);
  }

 public:
  static constexpr double kPopulationFloor = 1e-12;

 private:
  ReconstructionProblem pr_;
  Eigen::VectorXd times_;
  std::vector<HermitianOperator> ops_;
  Eigen::MatrixXd refs_;
  Eigen::VectorXd weights_;
  std::vector<KickGenerator> generators_;
  int source_j_max_ = 0;
  Eigen::VectorXd mask_;

  mutable std::optional<SignalEngine> engine_;
  mutable double engine_I_ = -1.0;
  mutable std::optional<Preparation> prep_cache_;
  mutable Eigen::VectorXd prep_P_;
  mutable double prep_I_ = -1.0;
  mutable std::optional<std::vector<Eigen::MatrixXd>> trace_cache_;
  mutable Eigen::VectorXd trace_P_;
  mutable double trace_I_ = -1.0;
};

inline double objective(const ParameterVector& x, const ReconstructionProblem& pr) { return Evaluator(pr).objective(x); }

inline Eigen::VectorXd grad_populations(const ParameterVector& x, const ReconstructionProblem& pr) {
  return Evaluator(pr).evaluate(x).dE_dp;
}

inline std::pair<Eigen::VectorXd, Eigen::VectorXd> grad_amplitudes(const ParameterVector& x, const ReconstructionProblem& pr) {
  if (pr.mode != ModelMode::amplitudes) throw ConfigurationError("amplitude gradients need amplitudes mode");
  const auto g = Evaluator(pr).evaluate(x);
  return {g.dE_da, g.dE_db};
}

inline Eigen::VectorXd grad_kick_strength(const ParameterVector& x, const ReconstructionProblem& pr) {
  if (pr.mode == ModelMode::amplitudes || pr.pulses.empty()) throw ConfigurationError("no kick derivative available in this problem");
  ParameterVector y = x;
  y.active.P = true;
  return Evaluator(pr).evaluate(y).dE_dP;
}

inline double grad_inertia(const ParameterVector& x, const ReconstructionProblem& pr) {
  ParameterVector y = x;
  y.active.I = true;
  return Evaluator(pr).evaluate(y).dE_dI;
}

/// dE/dp from the random-phase estimator; the problem's RPWF settings are replaced by (N, seed).
inline Eigen::VectorXd rpwf_population_gradient(const Eigen::VectorXd& p, ReconstructionProblem pr, int samples,
                                                std::uint64_t seed) {
  check_populations(p);
  pr.rpwf = {true, samples, seed};
  pr.mode = ModelMode::populations;
  pr.populations_free = true;
  ParameterVector x = nominal_parameters(pr);
  x.p = p;
  return Evaluator(std::move(pr)).evaluate(x).dE_dp;
}

struct FdResult {
  Eigen::VectorXd gradient;
  /// set when a step vanished against its coordinate or a difference fell below rounding
  bool underflow_warning = false;
};

inline double default_fd_step(ParameterBlock blk, const ParameterVector& x) {
  switch (blk) {
    case ParameterBlock::I: return 1e-4 * x.I;
    case ParameterBlock::T: return 1e-3;
    default: return 1e-6;
  }
}

/// Central differences of the objective in one block; frozen blocks give zeros. `order` 4 uses
/// the five-point stencil, which the I and T blocks need when signal phases are large.
/// A non-empty `components` restricts the differences to those indices (the rest stay zero).
inline FdResult finite_difference_oracle(const std::function<double(const ParameterVector&)>& f, const ParameterVector& x,
                                         ParameterBlock blk, double step, int order = 2,
                                         const std::vector<Eigen::Index>& components = {}) {
  if (!(step > 0.0)) throw InputError("finite-difference step must be positive");
  if (order != 2 && order != 4) throw InputError("finite-difference order must be 2 or 4");
  const Eigen::VectorXd base = x.block(blk);
  FdResult out{Eigen::VectorXd::Zero(base.size()), false};
  if (!x.active[blk]) return out;
  const double f0 = f(x);
  const auto at = [&](Eigen::Index i, double offset) {
    ParameterVector y = x;
    Eigen::VectorXd v = base;
    v[i] += offset;
    if (v[i] == base[i]) out.underflow_warning = true;
    y.set_block(blk, v);
    return f(y);
  };
  std::vector<Eigen::Index> which = components;
  if (which.empty()) {
    for (Eigen::Index i = 0; i < base.size(); ++i) which.push_back(i);
  }
  for (const Eigen::Index i : which) {
    if (i < 0 || i >= base.size()) throw InputError("finite-difference component outside the block");
    const double fp = at(i, step), fm = at(i, -step);
    const double diff = fp - fm;
    if (std::abs(diff) < 4.0 * std::numeric_limits<double>::epsilon() * std::abs(f0) && diff != 0.0) out.underflow_warning = true;
    if (order == 2) {
      out.gradient[i] = diff / (2.0 * step);
    } else {
      const double fpp = at(i, 2.0 * step), fmm = at(i, -2.0 * step);
      out.gradient[i] = (8.0 * diff - (fpp - fmm)) / (12.0 * step);
    }
  }
  return out;
}

inline int default_fd_order(ParameterBlock blk) { return blk == ParameterBlock::I || blk == ParameterBlock::T ? 4 : 2; }

inline FdResult finite_difference_oracle(const Evaluator& ev, const ParameterVector& x, ParameterBlock blk, double step,
                                         int order = 2, const std::vector<Eigen::Index>& components = {}) {
  return finite_difference_oracle([&](const ParameterVector& y) { return ev.objective(y); }, x, blk, step, order, components);
}

/// Reference routes that follow the matrix formulas literally; small problems only.
namespace literal {

/// B(t) = U^+(t) O U(t) as a dense matrix.
inline Eigen::MatrixXcd heisenberg_matrix(const HermitianOperator& O, const Spectrum& s, double t) {
  const Eigen::VectorXcd u = propagator_phases(s.energies, t);
  return u.conjugate().asDiagonal() * O.dense() * u.asDiagonal();
}

/// dE/da, dE/db by forming B(t_c) for every time and applying the quadratic-form identities.
inline QuadGrad amplitude_gradient(const Evaluator& ev, const ParameterVector& x) {
  const auto& pr = ev.problem();
  if (pr.mode != ModelMode::amplitudes) throw ConfigurationError("amplitude gradient needs amplitudes mode");
  const Eigen::Index d = pr.dim();
  const Spectrum s = build_spectrum(pr.basis, x.I);
  const GradientBundle g = ev.evaluate(x, false);
  QuadGrad out{2.0 * pr.ridge * x.a, 2.0 * pr.ridge * x.b};
  for (std::size_t o = 0; o < pr.trajectories.size(); ++o) {
    const HermitianOperator O = observable_operator(pr.basis, pr.trajectories[o].reference.kind);
    for (Eigen::Index c = 0; c < ev.times().size(); ++c) {
      const Eigen::MatrixXcd B = heisenberg_matrix(O, s, ev.times()[c]);
      const double r = 2.0 * pr.trajectories[o].weight * g.residuals(c, static_cast<Eigen::Index>(o));
      for (Eigen::Index j = 0; j < pr.members; ++j) {
        const QuadGrad q = quad_grad_a(B, x.psi(j, d));
        out.da.segment(j * d, d) += r * x.p[j] * q.da;
        out.db.segment(j * d, d) += r * x.p[j] * q.db;
      }
    }
  }
  return out;
}

/// d<O_j>(t)/dh_n with A_j = S_j^+ O S_j, S_j = diag(psi_j) and phase vector e^{-i h t}.
inline Eigen::VectorXd signal_energy_gradient(const HermitianOperator& O, const Eigen::VectorXcd& psi,
                                              const Eigen::VectorXd& h, double t) {
  const Eigen::MatrixXcd A = psi.conjugate().asDiagonal() * O.dense() * psi.asDiagonal();
  const Eigen::VectorXcd u = propagator_phases(h, t);
  const Eigen::VectorXcd Au = A * u;
  const Eigen::VectorXcd Atu = A.transpose() * u.conjugate();
  // O(t) = u^+ A u; d u_n / d h_n = -i t u_n; chain through the quadratic-form identities
  Eigen::VectorXd out(h.size());
  for (Eigen::Index n = 0; n < h.size(); ++n) {
    const cd du = cd(0.0, -t) * u[n];
    out[n] = (Atu[n] * du + std::conj(du) * Au[n]).real();
  }
  return out;
}

/// dE/dI assembled from signal_energy_gradient and dh/dI.
inline double inertia_gradient(const Evaluator& ev, const ParameterVector& x) {
  const auto& pr = ev.problem();
  const Spectrum s = build_spectrum(pr.basis, x.I);
  const GradientBundle g = ev.evaluate(x, false);
  std::vector<std::pair<double, Eigen::VectorXcd>> members;
  if (pr.mode == ModelMode::amplitudes) {
    for (Eigen::Index j = 0; j < pr.members; ++j) members.emplace_back(x.p[j], x.psi(j, pr.dim()));
  } else {
    if (pr.rpwf.enabled) throw ConfigurationError("literal inertia gradient covers exact ensembles only");
    const auto& prep = ev.preparation(x.P, x.I);
    const Eigen::VectorXd p = ev.effective_populations(x);
    for (std::size_t j = 0; j < pr.sources.size(); ++j) {
      members.emplace_back(p[static_cast<Eigen::Index>(j)], block_column(prep.total, pr.sources[j]));
    }
  }
  double out = 0.0;
  for (std::size_t o = 0; o < pr.trajectories.size(); ++o) {
    const HermitianOperator O = observable_operator(pr.basis, pr.trajectories[o].reference.kind);
    for (Eigen::Index c = 0; c < ev.times().size(); ++c) {
      const double r = 2.0 * pr.trajectories[o].weight * g.residuals(c, static_cast<Eigen::Index>(o));
      for (const auto& [w, psi] : members) {
        out += r * w * signal_energy_gradient(O, psi, s.energies, ev.times()[c]).dot(s.energy_derivative);
      }
    }
  }
  return out;
}

/// M(t) = N^-1 sum_k Theta_k^+ Pi^+ V^+ B(t) V Pi Theta_k over the source states.
inline Eigen::MatrixXcd rpwf_m_matrix(const Evaluator& ev, const ParameterVector& x, const HermitianOperator& O, double t) {
  const auto& pr = ev.problem();
  const Spectrum s = build_spectrum(pr.basis, x.I);
  const Eigen::MatrixXcd V = ev.preparation(x.P, x.I).total.dense();
  const auto np = static_cast<Eigen::Index>(pr.sources.size());
  Eigen::MatrixXcd VPi(pr.dim(), np);
  for (Eigen::Index j = 0; j < np; ++j) VPi.col(j) = V.col(pr.sources[static_cast<std::size_t>(j)]);
  const Eigen::MatrixXcd core = VPi.adjoint() * heisenberg_matrix(O, s, t) * VPi;
  Eigen::MatrixXcd M = Eigen::MatrixXcd::Zero(np, np);
  for (int k = 0; k < pr.rpwf.samples; ++k) {
    Eigen::VectorXcd theta(np);
    for (Eigen::Index j = 0; j < np; ++j) {
      theta[j] = std::polar(1.0, -rpwf_phase(pr.rpwf.seed, static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(j)));
    }
    M += theta.conjugate().asDiagonal() * core * theta.asDiagonal();
  }
  return M / static_cast<double>(pr.rpwf.samples);
}

/// sum_c 2 r_c (M + M^T) sqrt(p), then the chain rule to dE/dp.
inline Eigen::VectorXd rpwf_population_gradient(const Evaluator& ev, const ParameterVector& x) {
  const auto& pr = ev.problem();
  const GradientBundle g = ev.evaluate(x, false);
  const Eigen::VectorXd p = ev.effective_populations(x);
  const Eigen::VectorXd pt = p.cwiseMax(0.0).cwiseSqrt();
  Eigen::VectorXd dsq = Eigen::VectorXd::Zero(p.size());
  for (std::size_t o = 0; o < pr.trajectories.size(); ++o) {
    const HermitianOperator O = observable_operator(pr.basis, pr.trajectories[o].reference.kind);
    for (Eigen::Index c = 0; c < ev.times().size(); ++c) {
      const Eigen::MatrixXcd M = rpwf_m_matrix(ev, x, O, ev.times()[c]);
      const double r = 2.0 * pr.trajectories[o].weight * g.residuals(c, static_cast<Eigen::Index>(o));
      dsq += r * ((M + M.transpose()) * pt.cast<cd>()).real();
    }
  }
  Eigen::VectorXd out(p.size());
  for (Eigen::Index j = 0; j < p.size(); ++j) out[j] = dsq[j] / (2.0 * std::sqrt(std::max(p[j], Evaluator::kPopulationFloor)));
  return out;
}

}  // namespace literal

}  // namespace rotor_tomo
