#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "rotor_tomo/errors.hpp"
#include "rotor_tomo/problem.hpp"
#include "rotor_tomo/projection.hpp"

namespace rotor_tomo {

enum class StepPolicy { fixed, backtracking };

struct OptimizerConfig {
  int max_iterations = 500;
  StepPolicy step = StepPolicy::backtracking;
  /// step length for the fixed policy, and the first trial step for backtracking
  double eta = 1.0;
  double beta = 0.5;
  double c1 = 1e-4;
  int max_backtracks = 60;
  /// Barzilai-Borwein trial steps after the first iteration
  bool barzilai_borwein = true;
  /// sufficient decrease is measured against the largest E of this many recent iterates (1 = monotone)
  int nonmonotone_window = 1;
  /// extra multipliers on the natural step of each block
  double scale_amplitudes = 1.0, scale_populations = 1.0, scale_strength = 1.0, scale_inertia = 1.0, scale_temperature = 1.0;
  double grad_tol = 1e-9;
  double e_change_tol = 1e-10;
  int patience = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (max_iterations < 1) throw ConfigurationError("max_iterations must be at least 1");
    if (!(eta > 0.0)) throw ConfigurationError("step length must be positive");
    if (!(beta > 0.0 && beta < 1.0)) throw ConfigurationError("backtracking factor must lie in (0, 1)");
    if (!(c1 > 0.0 && c1 < 1.0)) throw ConfigurationError("sufficient-decrease constant must lie in (0, 1)");
    if (!(grad_tol > 0.0) || !(e_change_tol > 0.0)) throw ConfigurationError("tolerances must be positive");
    if (patience < 1) throw ConfigurationError("patience must be at least 1");
    if (max_backtracks < 1) throw ConfigurationError("max_backtracks must be at least 1");
    if (nonmonotone_window < 1) throw ConfigurationError("nonmonotone_window must be at least 1");
    for (double s : {scale_amplitudes, scale_populations, scale_strength, scale_inertia, scale_temperature}) {
      if (!(s > 0.0)) throw ConfigurationError("block step scales must be positive");
    }
  }
};

enum class RunStatus { converged, iteration_cap, numerical_failure };

inline std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::converged: return "converged";
    case RunStatus::iteration_cap: return "iteration_cap";
    case RunStatus::numerical_failure: return "numerical_failure";
  }
  return "?";
}

struct IterationRecord {
  int iteration = 0;
  double E = 0.0;
  double misfit = 0.0;
  /// norm of the difference between model and reference trajectories
  double target_error = 0.0;
  /// distance to a known ground truth, NaN when none is supplied
  double parameter_error = std::numeric_limits<double>::quiet_NaN();
  double step = 0.0;
  int backtracks = 0;
  double projected_gradient = 0.0;
  std::vector<std::pair<std::string, double>> grad_norms;
  std::vector<std::pair<std::string, double>> scalars;
  ProjectionActivity projection;
  std::uint64_t snapshot = 0;
  std::string note;
};

struct RunTrace {
  std::vector<IterationRecord> records;
  RunStatus status = RunStatus::iteration_cap;
  std::string reason;
};

inline nlohmann::json to_json(const IterationRecord& r) {
  nlohmann::json j{{"iteration", r.iteration},
                   {"E", r.E},
                   {"misfit", r.misfit},
                   {"target_error", r.target_error},
                   {"step", r.step},
                   {"backtracks", r.backtracks},
                   {"projected_gradient", r.projected_gradient},
                   {"snapshot", r.snapshot}};
  j["parameter_error"] = std::isnan(r.parameter_error) ? nlohmann::json(nullptr) : nlohmann::json(r.parameter_error);
  for (const auto& [k, v] : r.grad_norms) j["grad_norm"][k] = v;
  for (const auto& [k, v] : r.scalars) j["params"][k] = v;
  j["projection_active"] = {{"amplitudes", r.projection.amplitudes},
                            {"populations", r.projection.populations},
                            {"strength", r.projection.strength},
                            {"inertia", r.projection.inertia},
                            {"temperature", r.projection.temperature}};
  if (!r.note.empty()) j["note"] = r.note;
  return j;
}

inline void write_trace_jsonl(const std::string& path, const RunTrace& trace) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  for (const auto& r : trace.records) out << to_json(r).dump() << '\n';
}

/// FNV-1a over the raw bytes of a vector.
inline std::uint64_t snapshot_hash(const Eigen::VectorXd& v) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
  for (std::size_t i = 0; i < static_cast<std::size_t>(v.size()) * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

/// Objective value and gradient at a flat point.
struct FlatEval {
  double E = 0.0;
  Eigen::VectorXd grad;
};

struct FlatHooks {
  std::function<FlatEval(const Eigen::VectorXd&)> evaluate;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> project;
  /// fills diagnostic fields of a record after each accepted step (optional)
  std::function<void(const Eigen::VectorXd&, const FlatEval&, IterationRecord&)> annotate;
};

struct FlatResult {
  Eigen::VectorXd x;
  FlatEval at_x;
  RunTrace trace;
};

/// Projected gradient descent on a flat vector: x <- P(x - alpha grad).
inline FlatResult minimize_flat(const FlatHooks& hooks, const Eigen::VectorXd& x0, const OptimizerConfig& cfg) {
  cfg.validate();
  FlatResult res;
  Eigen::VectorXd x = hooks.project(x0);
  FlatEval fx = hooks.evaluate(x);
  if (!std::isfinite(fx.E) || !fx.grad.allFinite()) {
    res.trace.status = RunStatus::numerical_failure;
    res.trace.reason = "non-finite objective or gradient at the starting point";
    res.x = x;
    res.at_x = fx;
    return res;
  }
  Eigen::VectorXd x_prev, g_prev;
  double alpha = cfg.eta;
  int quiet = 0;
  std::vector<double> recent{fx.E};
  const auto stationarity = [&](const Eigen::VectorXd& p, const Eigen::VectorXd& g) { return (hooks.project(p - g) - p).norm(); };
  {
    IterationRecord start;
    start.E = fx.E;
    start.snapshot = snapshot_hash(x);
    start.note = "start";
    if (hooks.annotate) hooks.annotate(x, fx, start);
    start.projected_gradient = stationarity(x, fx.grad);
    res.trace.records.push_back(start);
  }

  for (int it = 1; it <= cfg.max_iterations; ++it) {
    IterationRecord rec;
    rec.iteration = it;
    if (cfg.step == StepPolicy::backtracking && cfg.barzilai_borwein && x_prev.size() == x.size()) {
      const Eigen::VectorXd s = x - x_prev, y = fx.grad - g_prev;
      const double sy = s.dot(y);
      if (sy > 0.0) alpha = s.squaredNorm() / sy;
      else alpha = std::min(alpha * 4.0, 1e12);
    } else if (cfg.step == StepPolicy::backtracking && it > 1) {
      alpha = std::min(alpha * 2.0, 1e12);
    }
    Eigen::VectorXd x_new;
    FlatEval f_new;
    bool accepted = false;
    if (cfg.step == StepPolicy::fixed) {
      x_new = hooks.project(x - cfg.eta * fx.grad);
      f_new = hooks.evaluate(x_new);
      alpha = cfg.eta;
      accepted = true;
    } else {
      const double reference = *std::max_element(recent.begin(), recent.end());
      for (int bt = 0; bt <= cfg.max_backtracks; ++bt) {
        x_new = hooks.project(x - alpha * fx.grad);
        f_new = hooks.evaluate(x_new);
        if (std::isfinite(f_new.E) && f_new.E <= reference + cfg.c1 * fx.grad.dot(x_new - x)) {
          accepted = true;
          rec.backtracks = bt;
          break;
        }
        alpha *= cfg.beta;
      }
    }
    if (!accepted) {
      rec.E = fx.E;
      rec.step = 0.0;
      rec.backtracks = cfg.max_backtracks;
      rec.note = "line search exhausted";
      rec.projected_gradient = stationarity(x, fx.grad);
      rec.snapshot = snapshot_hash(x);
      if (hooks.annotate) hooks.annotate(x, fx, rec);
      res.trace.records.push_back(rec);
      res.trace.status = RunStatus::converged;
      res.trace.reason = "no sufficient decrease along the projected arc (stationary to rounding)";
      break;
    }
    if (!std::isfinite(f_new.E) || !f_new.grad.allFinite()) {
      rec.note = "non-finite objective or gradient";
      rec.E = f_new.E;
      res.trace.records.push_back(rec);
      res.trace.status = RunStatus::numerical_failure;
      res.trace.reason = "non-finite objective or gradient";
      break;
    }
    const double change = std::abs(fx.E - f_new.E) / std::max(std::abs(fx.E), std::numeric_limits<double>::min());
    x_prev = x;
    g_prev = fx.grad;
    x = x_new;
    fx = f_new;
    recent.push_back(fx.E);
    if (static_cast<int>(recent.size()) > cfg.nonmonotone_window) recent.erase(recent.begin());
    rec.E = fx.E;
    rec.step = alpha;
    rec.snapshot = snapshot_hash(x);
    if (hooks.annotate) hooks.annotate(x, fx, rec);
    rec.projected_gradient = stationarity(x, fx.grad);
    res.trace.records.push_back(rec);

    quiet = change < cfg.e_change_tol ? quiet + 1 : 0;
    if (rec.projected_gradient < cfg.grad_tol) {
      res.trace.status = RunStatus::converged;
      res.trace.reason = "projected gradient below tolerance";
      break;
    }
    if (quiet >= cfg.patience) {
      res.trace.status = RunStatus::converged;
      res.trace.reason = "relative change of E below tolerance for " + std::to_string(cfg.patience) + " iterations";
      break;
    }
    if (it == cfg.max_iterations) {
      res.trace.status = RunStatus::iteration_cap;
      res.trace.reason = "iteration cap reached";
    }
  }
  res.x = x;
  res.at_x = fx;
  return res;
}

/// Maps the active blocks of a ParameterVector to a flat, per-block scaled vector.
class FlatLayout {
 public:
  FlatLayout(const ParameterVector& nominal, const OptimizerConfig& cfg) : base_(nominal) {
    const auto add = [&](ParameterBlock b, Eigen::Index n, double scale) {
      if (nominal.active[b]) {
        segments_.push_back({b, size_, n, scale});
        size_ += n;
      }
    };
    add(ParameterBlock::a, nominal.a.size(), cfg.scale_amplitudes);
    add(ParameterBlock::b, nominal.b.size(), cfg.scale_amplitudes);
    add(ParameterBlock::p, nominal.p.size(), cfg.scale_populations);
    add(ParameterBlock::P, nominal.P.size(), cfg.scale_strength);
    // I and T are measured in units of their starting value so that unit steps are comparable
    add(ParameterBlock::I, 1, cfg.scale_inertia * std::abs(nominal.I));
    add(ParameterBlock::T, 1, cfg.scale_temperature * std::abs(nominal.T));
  }

  Eigen::Index size() const { return size_; }

  Eigen::VectorXd to_flat(const ParameterVector& x) const {
    Eigen::VectorXd y(size_);
    for (const auto& s : segments_) y.segment(s.offset, s.length) = x.block(s.block) / s.scale;
    return y;
  }

  ParameterVector from_flat(const Eigen::VectorXd& y) const {
    ParameterVector x = base_;
    for (const auto& s : segments_) x.set_block(s.block, y.segment(s.offset, s.length) * s.scale);
    return x;
  }

  Eigen::VectorXd gradient(const GradientBundle& g) const {
    Eigen::VectorXd out(size_);
    for (const auto& s : segments_) out.segment(s.offset, s.length) = g.block(s.block) * s.scale;
    return out;
  }

 private:
  struct Segment {
    ParameterBlock block;
    Eigen::Index offset;
    Eigen::Index length;
    double scale;
  };
  ParameterVector base_;
  std::vector<Segment> segments_;
  Eigen::Index size_ = 0;
};

/// Feasible random start: standard-normal amplitudes on the support (normalized), uniform
/// populations, scalars at their guess (problem value) or the box midpoint when the guess is outside.
inline ParameterVector initialize(const ReconstructionProblem& pr, std::uint64_t seed) {
  ParameterVector x = nominal_parameters(pr);
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal;
  if (x.active.a) {
    const Eigen::Index d = pr.dim();
    for (Eigen::Index j = 0; j < pr.members; ++j) {
      Eigen::VectorXcd v(d);
      for (Eigen::Index n = 0; n < d; ++n) {
        const double re = normal(gen), im = normal(gen);
        v[n] = (pr.support.size() == 0 || pr.support[n] != 0.0) ? cd(re, im) : cd(0.0);
      }
      x.set_psi(j, v.normalized());
    }
  }
  if (x.active.p) x.p = Eigen::VectorXd::Constant(x.p.size(), 1.0 / static_cast<double>(x.p.size()));
  const auto guess = [](const ScalarParam& s) {
    if (!s.free) return s.value;
    return (s.value >= s.lo && s.value <= s.hi) ? s.value : 0.5 * (s.lo + s.hi);
  };
  for (std::size_t k = 0; k < pr.pulses.size(); ++k) x.P[static_cast<Eigen::Index>(k)] = guess(pr.pulses[k].strength);
  x.I = guess(pr.inertia);
  if (pr.mode == ModelMode::temperature) x.T = guess(pr.temperature);
  return project(x, constraints_for(pr));
}

/// Rotates psi so that its largest-magnitude coefficient is real and positive.
inline Eigen::VectorXcd gauge_fix(const Eigen::VectorXcd& psi) {
  if (psi.size() == 0) return psi;
  Eigen::Index k = 0;
  psi.cwiseAbs().maxCoeff(&k);
  if (std::abs(psi[k]) == 0.0) return psi;
  return psi * std::polar(1.0, -std::arg(psi[k]));
}

inline ParameterVector gauge_fixed(const ParameterVector& x, Eigen::Index members, Eigen::Index d) {
  ParameterVector y = x;
  if (x.a.size() == members * d && members > 0) {
    for (Eigen::Index j = 0; j < members; ++j) y.set_psi(j, gauge_fix(x.psi(j, d)));
  }
  return y;
}

struct ReconstructionResult {
  ParameterVector x;
  GradientBundle final;
  RunTrace trace;
};

/// Optional distance to a known answer, recorded per iteration.
using TruthMetric = std::function<double(const ParameterVector&)>;

/// The descent loop: initialize (or start at x0), evaluate, step, project, until convergence.
inline ReconstructionResult minimize(const Evaluator& ev, const OptimizerConfig& cfg, std::optional<ParameterVector> x0 = std::nullopt,
                                     const TruthMetric& truth = nullptr) {
  const auto& pr = ev.problem();
  const ParameterVector start = x0 ? *x0 : initialize(pr, cfg.seed);
  const ActiveMask act = start.active;
  if (!(act.a || act.b || act.p || act.P || act.I || act.T)) throw ConfigurationError("nothing to optimize: every block is frozen");
  const ConstraintSet cons = constraints_for(pr);
  const FlatLayout layout(start, cfg);
  std::optional<GradientBundle> last;
  Eigen::VectorXd last_y;
  ProjectionActivity last_activity;

  FlatHooks hooks;
  hooks.evaluate = [&](const Eigen::VectorXd& y) {
    last = ev.evaluate(layout.from_flat(y));
    last_y = y;
    return FlatEval{last->E, layout.gradient(*last)};
  };
  hooks.project = [&](const Eigen::VectorXd& y) { return layout.to_flat(project(layout.from_flat(y), cons, &last_activity)); };
  hooks.annotate = [&](const Eigen::VectorXd& y, const FlatEval&, IterationRecord& rec) {
    const ParameterVector x = layout.from_flat(y);
    if (last_y.size() != y.size() || last_y != y) {
      last = ev.evaluate(x);
      last_y = y;
    }
    rec.misfit = last->misfit;
    rec.target_error = std::sqrt(last->misfit);
    for (auto blk : {ParameterBlock::a, ParameterBlock::b, ParameterBlock::p, ParameterBlock::P, ParameterBlock::I, ParameterBlock::T}) {
      if (act[blk]) rec.grad_norms.emplace_back(std::string(to_string(blk)), last->block(blk).norm());
    }
    for (Eigen::Index k = 0; k < x.P.size(); ++k) rec.scalars.emplace_back("P" + std::to_string(k + 1), x.P[k]);
    if (act.I) rec.scalars.emplace_back("I", x.I);
    if (act.T) rec.scalars.emplace_back("T", x.T);
    rec.projection = last_activity;
    if (truth) rec.parameter_error = truth(x);
  };

  FlatResult fr = minimize_flat(hooks, layout.to_flat(start), cfg);
  ReconstructionResult out;
  out.x = gauge_fixed(layout.from_flat(fr.x), pr.mode == ModelMode::amplitudes ? pr.members : 0, pr.dim());
  out.final = ev.evaluate(layout.from_flat(fr.x));
  out.trace = std::move(fr.trace);
  return out;
}

inline ReconstructionResult reconstruct(const ReconstructionProblem& pr, const OptimizerConfig& cfg, const TruthMetric& truth = nullptr) {
  const Evaluator ev(pr);
  return minimize(ev, cfg, std::nullopt, truth);
}

}  // namespace rotor_tomo
