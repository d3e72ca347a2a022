#pragma once

// Scenario configs (JSON), built-in presets, and the simulate / reconstruct drivers behind the CLI.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "rotor_tomo/errors.hpp"
#include "rotor_tomo/pgd.hpp"
#include "rotor_tomo/problem.hpp"
#include "rotor_tomo/trajectory_io.hpp"

namespace rotor_tomo {

inline constexpr const char* kVersion = "0.1.0";
/// atomic units of time per femtosecond
inline constexpr double kAuPerFs = 1.0 / 0.024188843265857;

using nlohmann::json;

/// Which basis states a selector admits: J <= j_max, parity, and optional M restrictions.
struct StateSelector {
  int j_max = 0;
  ParityFilter parity = ParityFilter::all_J;
  std::vector<int> m;
  bool even_m = false;

  bool admits(const RotorState& s) const {
    if (s.J > j_max) return false;
    if (parity == ParityFilter::even_J_only && s.J % 2 != 0) return false;
    if (even_m && s.M % 2 != 0) return false;
    if (!m.empty() && std::find(m.begin(), m.end(), s.M) == m.end()) return false;
    return true;
  }

  std::vector<Eigen::Index> indices(const RotorBasis& basis) const {
    std::vector<Eigen::Index> out;
    for (std::size_t n = 0; n < basis.size(); ++n) {
      if (admits(basis.state(n))) out.push_back(static_cast<Eigen::Index>(n));
    }
    return out;
  }
};

enum class InitialKind { pure, ensemble, thermal, uniform_random, unknown_pure, unknown_populations };

struct WeightedState {
  int J = 0;
  int M = 0;
  double p = 1.0;
};

struct InitialState {
  InitialKind kind = InitialKind::pure;
  std::vector<WeightedState> states;
  StateSelector selector;
  ScalarParam temperature;
  std::uint64_t seed = 0;
  int members = 1;
};

struct ObservableSpec {
  ObservableKind kind = ObservableKind::cos2_theta;
  std::string file;
  double weight = 1.0;
};

struct ScenarioConfig {
  std::string name;
  RotorBasis basis;
  ScalarParam inertia;
  std::vector<PulseSpec> pulses;
  InitialState initial;
  std::vector<ObservableSpec> observables;
  /// count and span (a.u.) of the uniform grid; span 0 means one revival period
  Eigen::Index time_points = 500;
  double time_span = 0.0;
  bool has_time_grid = false;
  double noise_level = 0.0;
  std::uint64_t noise_seed = 0;
  /// simulate only: drop prepared components above this J and renormalize
  std::optional<int> state_j_max;
  double ridge = 0.0;
  RpwfOptions rpwf;
  OptimizerConfig optimizer;
  std::filesystem::path directory;
  json source;

  bool has_unknowns() const {
    if (inertia.free || initial.temperature.free) return true;
    if (initial.kind == InitialKind::unknown_pure || initial.kind == InitialKind::unknown_populations) return true;
    return std::any_of(pulses.begin(), pulses.end(), [](const PulseSpec& p) { return p.strength.free; });
  }

  Eigen::VectorXd time_grid() const {
    const double span = time_span > 0.0 ? time_span : revival_period(inertia.value);
    return uniform_time_grid(time_points, span);
  }
};

namespace config_detail {

[[noreturn]] inline void fail(const std::string& where, const std::string& what) { throw ConfigurationError(where + ": " + what); }

inline void only_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) fail(where, "expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      std::string list;
      for (const char* a : allowed) list += std::string(list.empty() ? "" : ", ") + a;
      fail(where, "unknown key '" + key + "' (allowed: " + list + ")");
    }
  }
}

inline const json& need(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) fail(where, std::string("missing required key '") + key + "'");
  return j.at(key);
}

inline double number(const json& j, const std::string& where) {
  if (!j.is_number()) fail(where, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) fail(where, "must be finite");
  return v;
}

inline int integer(const json& j, const std::string& where) {
  if (!j.is_number_integer()) fail(where, "expected an integer");
  return j.get<int>();
}

inline std::uint64_t seed(const json& j, const std::string& where) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0)) fail(where, "expected a non-negative integer seed");
  return j.get<std::uint64_t>();
}

inline std::string text(const json& j, const std::string& where) {
  if (!j.is_string()) fail(where, "expected a string");
  return j.get<std::string>();
}

/// Converts {value, unit} for a given quantity. `kind` is "time", "inertia" or "temperature".
inline double unit_value(double value, const std::string& unit, const std::string& kind, const std::string& where, double revival) {
  if (kind == "time") {
    if (unit == "au") return value;
    if (unit == "fs") return value * kAuPerFs;
    if (unit == "revival") {
      if (!(revival > 0.0)) fail(where, "unit 'revival' needs a known moment of inertia");
      return value * revival;
    }
    fail(where, "unknown time unit '" + unit + "' (expected au, fs or revival)");
  }
  if (kind == "inertia") {
    if (unit == "au") return value;
    fail(where, "unknown moment-of-inertia unit '" + unit + "' (expected au)");
  }
  if (unit == "K") return value;
  fail(where, "unknown temperature unit '" + unit + "' (expected K)");
}

/// A physical scalar: {"value": x, "unit": u} or {"unknown": true, "bounds": [lo, hi], "guess": x, "unit": u}.
inline ScalarParam quantity(const json& j, const std::string& where, const std::string& kind, bool allow_unknown, double revival = 0.0) {
  if (!j.is_object()) fail(where, "expected an object with 'value' and 'unit'");
  const std::string unit = text(need(j, "unit", where), where + ".unit");
  ScalarParam s;
  if (j.contains("unknown")) {
    only_keys(j, where, {"unknown", "bounds", "guess", "unit"});
    if (!j.at("unknown").is_boolean() || !j.at("unknown").get<bool>()) fail(where + ".unknown", "must be true when present");
    if (!allow_unknown) fail(where, "unknown parameters are not allowed here (simulation needs fully known parameters)");
    const json& b = need(j, "bounds", where);
    if (!b.is_array() || b.size() != 2) fail(where + ".bounds", "expected [lo, hi]");
    s.free = true;
    s.lo = unit_value(number(b[0], where + ".bounds[0]"), unit, kind, where, revival);
    s.hi = unit_value(number(b[1], where + ".bounds[1]"), unit, kind, where, revival);
    if (!(s.lo <= s.hi)) fail(where + ".bounds", "lower bound exceeds upper bound");
    s.value = j.contains("guess") ? unit_value(number(j.at("guess"), where + ".guess"), unit, kind, where, revival) : 0.5 * (s.lo + s.hi);
    return s;
  }
  only_keys(j, where, {"value", "unit"});
  s.value = unit_value(number(need(j, "value", where), where + ".value"), unit, kind, where, revival);
  return s;
}

/// Kick strength: a bare number or {"unknown": true, "bounds": [lo, hi], "guess": x}.
inline ScalarParam strength(const json& j, const std::string& where, bool allow_unknown) {
  if (j.is_number()) return ScalarParam{number(j, where), false, 0.0, 0.0};
  if (!j.is_object() || !j.contains("unknown")) fail(where, "expected a number or an unknown-parameter object");
  only_keys(j, where, {"unknown", "bounds", "guess"});
  if (!allow_unknown) fail(where, "unknown parameters are not allowed here (simulation needs fully known parameters)");
  const json& b = need(j, "bounds", where);
  if (!b.is_array() || b.size() != 2) fail(where + ".bounds", "expected [lo, hi]");
  ScalarParam s{0.0, true, number(b[0], where + ".bounds[0]"), number(b[1], where + ".bounds[1]")};
  if (!(s.lo <= s.hi)) fail(where + ".bounds", "lower bound exceeds upper bound");
  s.value = j.contains("guess") ? number(j.at("guess"), where + ".guess") : 0.5 * (s.lo + s.hi);
  return s;
}

inline Polarization polarization(const json& j, const std::string& where) {
  try {
    if (j.is_string()) return parse_polarization(j.get<std::string>());
    if (j.is_array() && j.size() == 3) {
      Eigen::Vector3d n(number(j[0], where), number(j[1], where), number(j[2], where));
      return Polarization(n);
    }
  } catch (const InputError& e) {
    fail(where, e.what());
  }
  fail(where, "expected X, Y, Z, XY45 or a unit 3-vector");
}

inline StateSelector selector(const json& j, const std::string& where) {
  only_keys(j, where, {"j_max", "parity", "m", "m_parity"});
  StateSelector s;
  s.j_max = integer(need(j, "j_max", where), where + ".j_max");
  if (s.j_max < 0) fail(where + ".j_max", "must be non-negative");
  if (j.contains("parity")) {
    try {
      s.parity = parse_parity(text(j.at("parity"), where + ".parity"));
    } catch (const InputError& e) {
      fail(where + ".parity", e.what());
    }
  }
  if (j.contains("m")) {
    if (!j.at("m").is_array() || j.at("m").empty()) fail(where + ".m", "expected a non-empty list of M values");
    for (const auto& v : j.at("m")) s.m.push_back(integer(v, where + ".m"));
  }
  if (j.contains("m_parity")) {
    const std::string mp = text(j.at("m_parity"), where + ".m_parity");
    if (mp == "even") s.even_m = true;
    else if (mp != "all") fail(where + ".m_parity", "expected 'even' or 'all'");
  }
  return s;
}

inline OptimizerConfig optimizer(const json& j, const std::string& where) {
  only_keys(j, where,
            {"max_iterations", "step", "eta", "beta", "c1", "max_backtracks", "barzilai_borwein", "nonmonotone_window", "scales",
             "grad_tol", "e_change_tol", "patience", "seed"});
  OptimizerConfig c;
  if (j.contains("max_iterations")) c.max_iterations = integer(j.at("max_iterations"), where + ".max_iterations");
  if (j.contains("step")) {
    const std::string s = text(j.at("step"), where + ".step");
    if (s == "fixed") c.step = StepPolicy::fixed;
    else if (s == "backtracking") c.step = StepPolicy::backtracking;
    else fail(where + ".step", "expected 'fixed' or 'backtracking'");
  }
  if (j.contains("eta")) c.eta = number(j.at("eta"), where + ".eta");
  if (j.contains("beta")) c.beta = number(j.at("beta"), where + ".beta");
  if (j.contains("c1")) c.c1 = number(j.at("c1"), where + ".c1");
  if (j.contains("max_backtracks")) c.max_backtracks = integer(j.at("max_backtracks"), where + ".max_backtracks");
  if (j.contains("barzilai_borwein")) {
    if (!j.at("barzilai_borwein").is_boolean()) fail(where + ".barzilai_borwein", "expected true or false");
    c.barzilai_borwein = j.at("barzilai_borwein").get<bool>();
  }
  if (j.contains("nonmonotone_window")) c.nonmonotone_window = integer(j.at("nonmonotone_window"), where + ".nonmonotone_window");
  if (j.contains("scales")) {
    const json& s = j.at("scales");
    const std::string w = where + ".scales";
    only_keys(s, w, {"amplitudes", "populations", "strength", "inertia", "temperature"});
    if (s.contains("amplitudes")) c.scale_amplitudes = number(s.at("amplitudes"), w + ".amplitudes");
    if (s.contains("populations")) c.scale_populations = number(s.at("populations"), w + ".populations");
    if (s.contains("strength")) c.scale_strength = number(s.at("strength"), w + ".strength");
    if (s.contains("inertia")) c.scale_inertia = number(s.at("inertia"), w + ".inertia");
    if (s.contains("temperature")) c.scale_temperature = number(s.at("temperature"), w + ".temperature");
  }
  if (j.contains("grad_tol")) c.grad_tol = number(j.at("grad_tol"), where + ".grad_tol");
  if (j.contains("e_change_tol")) c.e_change_tol = number(j.at("e_change_tol"), where + ".e_change_tol");
  if (j.contains("patience")) c.patience = integer(j.at("patience"), where + ".patience");
  if (j.contains("seed")) c.seed = seed(j.at("seed"), where + ".seed");
  try {
    c.validate();
  } catch (const ConfigurationError& e) {
    fail(where, e.what());
  }
  return c;
}

inline InitialState initial_state(const json& j, const std::string& where, bool allow_unknown) {
  const std::string kind = text(need(j, "kind", where), where + ".kind");
  InitialState s;
  if (kind == "pure") {
    only_keys(j, where, {"kind", "J", "M"});
    s.kind = InitialKind::pure;
    s.states.push_back({integer(need(j, "J", where), where + ".J"), integer(need(j, "M", where), where + ".M"), 1.0});
  } else if (kind == "ensemble") {
    only_keys(j, where, {"kind", "states"});
    s.kind = InitialKind::ensemble;
    const json& list = need(j, "states", where);
    if (!list.is_array() || list.empty()) fail(where + ".states", "expected a non-empty list of {J, M, p}");
    double total = 0.0;
    for (std::size_t k = 0; k < list.size(); ++k) {
      const std::string w = where + ".states[" + std::to_string(k) + "]";
      only_keys(list[k], w, {"J", "M", "p"});
      WeightedState ws{integer(need(list[k], "J", w), w + ".J"), integer(need(list[k], "M", w), w + ".M"), number(need(list[k], "p", w), w + ".p")};
      if (ws.p < 0.0) fail(w + ".p", "populations must be non-negative");
      total += ws.p;
      s.states.push_back(ws);
    }
    if (std::abs(total - 1.0) > 1e-12) fail(where + ".states", "populations sum to " + format17(total) + ", expected 1");
  } else if (kind == "thermal") {
    only_keys(j, where, {"kind", "temperature", "sources"});
    s.kind = InitialKind::thermal;
    s.temperature = quantity(need(j, "temperature", where), where + ".temperature", "temperature", allow_unknown);
    if (!(s.temperature.value > 0.0) || (s.temperature.free && !(s.temperature.lo > 0.0))) fail(where + ".temperature", "must be positive");
    s.selector = selector(need(j, "sources", where), where + ".sources");
  } else if (kind == "uniform_random") {
    only_keys(j, where, {"kind", "sources", "seed"});
    s.kind = InitialKind::uniform_random;
    s.selector = selector(need(j, "sources", where), where + ".sources");
    s.seed = seed(need(j, "seed", where), where + ".seed");
  } else if (kind == "unknown_pure") {
    only_keys(j, where, {"kind", "support", "members"});
    if (!allow_unknown) fail(where, "an unknown initial state cannot be simulated");
    s.kind = InitialKind::unknown_pure;
    s.selector = selector(need(j, "support", where), where + ".support");
    if (j.contains("members")) s.members = integer(j.at("members"), where + ".members");
    if (s.members < 1) fail(where + ".members", "must be at least 1");
  } else if (kind == "unknown_populations") {
    only_keys(j, where, {"kind", "sources"});
    if (!allow_unknown) fail(where, "unknown populations cannot be simulated");
    s.kind = InitialKind::unknown_populations;
    s.selector = selector(need(j, "sources", where), where + ".sources");
  } else {
    fail(where + ".kind", "unknown initial-state kind '" + kind +
                              "' (expected pure, ensemble, thermal, uniform_random, unknown_pure or unknown_populations)");
  }
  return s;
}

}  // namespace config_detail

enum class ConfigUse { simulate, reconstruct };

/// Schema-checks a scenario document. `directory` resolves relative trajectory file names.
inline ScenarioConfig parse_scenario(const json& j, ConfigUse use, const std::filesystem::path& directory = {}) {
  using namespace config_detail;
  const bool unknowns_ok = use == ConfigUse::reconstruct;
  only_keys(j, "config",
            {"name", "basis", "inertia", "pulses", "initial_state", "observables", "time_grid", "noise", "state_j_max", "ridge", "rpwf",
             "optimizer"});
  ScenarioConfig c;
  c.source = j;
  c.directory = directory;
  c.name = j.contains("name") ? text(j.at("name"), "config.name") : "scenario";
  if (c.name.empty() || c.name.find_first_of("/\\") != std::string::npos) fail("config.name", "must be a non-empty plain file stem");

  const json& b = need(j, "basis", "config");
  only_keys(b, "config.basis", {"j_max", "parity"});
  const int j_max = integer(need(b, "j_max", "config.basis"), "config.basis.j_max");
  if (j_max < 0) fail("config.basis.j_max", "must be non-negative");
  if (j_max > 200) fail("config.basis.j_max", "is larger than the supported maximum of 200");
  ParityFilter parity = ParityFilter::all_J;
  if (b.contains("parity")) {
    try {
      parity = parse_parity(text(b.at("parity"), "config.basis.parity"));
    } catch (const InputError& e) {
      fail("config.basis.parity", e.what());
    }
  }
  c.basis = build_basis(j_max, parity);

  c.inertia = quantity(need(j, "inertia", "config"), "config.inertia", "inertia", unknowns_ok);
  if (!(c.inertia.value > 0.0) || (c.inertia.free && !(c.inertia.lo > 0.0))) fail("config.inertia", "moment of inertia must be positive");
  const double revival = c.inertia.free ? 0.0 : revival_period(c.inertia.value);

  if (j.contains("pulses")) {
    const json& ps = j.at("pulses");
    if (!ps.is_array()) fail("config.pulses", "expected a list");
    for (std::size_t k = 0; k < ps.size(); ++k) {
      const std::string w = "config.pulses[" + std::to_string(k) + "]";
      only_keys(ps[k], w, {"polarization", "strength", "delay"});
      PulseSpec p;
      p.polarization = polarization(need(ps[k], "polarization", w), w + ".polarization");
      p.strength = strength(need(ps[k], "strength", w), w + ".strength", unknowns_ok);
      if (ps[k].contains("delay")) p.delay = quantity(ps[k].at("delay"), w + ".delay", "time", false, revival).value;
      if (!(p.delay >= 0.0)) fail(w + ".delay", "must be non-negative");
      c.pulses.push_back(p);
    }
  }

  c.initial = initial_state(need(j, "initial_state", "config"), "config.initial_state", unknowns_ok);
  for (const auto& s : c.initial.states) {
    if (!c.basis.contains(s.J, s.M)) {
      fail("config.initial_state", "state |" + std::to_string(s.J) + "," + std::to_string(s.M) + "> is not in the basis");
    }
  }
  if (c.initial.kind != InitialKind::pure && c.initial.kind != InitialKind::ensemble && c.initial.selector.indices(c.basis).empty()) {
    fail("config.initial_state", "the state selector admits no basis states");
  }

  const json& obs = need(j, "observables", "config");
  if (!obs.is_array() || obs.empty()) fail("config.observables", "at least one observable is required");
  std::set<ObservableKind> seen;
  for (std::size_t k = 0; k < obs.size(); ++k) {
    const std::string w = "config.observables[" + std::to_string(k) + "]";
    ObservableSpec o;
    const json* kind_field = &obs[k];
    if (obs[k].is_object()) {
      only_keys(obs[k], w, {"kind", "file", "weight"});
      kind_field = &need(obs[k], "kind", w);
      if (obs[k].contains("file")) o.file = text(obs[k].at("file"), w + ".file");
      if (obs[k].contains("weight")) o.weight = number(obs[k].at("weight"), w + ".weight");
      if (!(o.weight >= 0.0)) fail(w + ".weight", "must be non-negative");
    }
    try {
      o.kind = parse_observable(text(*kind_field, w + ".kind"));
    } catch (const InputError& e) {
      fail(w, e.what());
    }
    if (!seen.insert(o.kind).second) fail(w, "observable listed twice");
    if (use == ConfigUse::reconstruct) {
      if (o.file.empty()) fail(w, "reconstruction needs a 'file' with the reference trajectory");
      const auto path = std::filesystem::path(o.file).is_absolute() ? std::filesystem::path(o.file) : directory / o.file;
      if (!std::filesystem::exists(path)) fail(w + ".file", "no such file: " + path.string());
    }
    c.observables.push_back(o);
  }

  if (j.contains("time_grid")) {
    const json& g = j.at("time_grid");
    only_keys(g, "config.time_grid", {"count", "span"});
    c.has_time_grid = true;
    c.time_points = integer(need(g, "count", "config.time_grid"), "config.time_grid.count");
    if (c.time_points < 1) fail("config.time_grid.count", "must be at least 1");
    c.time_span = quantity(need(g, "span", "config.time_grid"), "config.time_grid.span", "time", false, revival).value;
    if (!(c.time_span > 0.0)) fail("config.time_grid.span", "must be positive");
  } else if (use == ConfigUse::simulate) {
    if (c.inertia.free) fail("config", "a time grid is required");
    c.has_time_grid = true;
  }

  if (j.contains("noise")) {
    const json& n = j.at("noise");
    only_keys(n, "config.noise", {"level", "seed"});
    c.noise_level = number(need(n, "level", "config.noise"), "config.noise.level");
    if (c.noise_level < 0.0) fail("config.noise.level", "must be non-negative");
    if (n.contains("seed")) c.noise_seed = seed(n.at("seed"), "config.noise.seed");
  }
  if (j.contains("state_j_max")) {
    c.state_j_max = integer(j.at("state_j_max"), "config.state_j_max");
    if (*c.state_j_max < 0) fail("config.state_j_max", "must be non-negative");
  }
  if (j.contains("ridge")) {
    c.ridge = number(j.at("ridge"), "config.ridge");
    if (c.ridge < 0.0) fail("config.ridge", "must be non-negative");
  }
  if (j.contains("rpwf")) {
    const json& r = j.at("rpwf");
    only_keys(r, "config.rpwf", {"enabled", "samples", "seed"});
    c.rpwf.enabled = !r.contains("enabled") || (r.at("enabled").is_boolean() && r.at("enabled").get<bool>());
    if (r.contains("enabled") && !r.at("enabled").is_boolean()) fail("config.rpwf.enabled", "expected true or false");
    if (r.contains("samples")) c.rpwf.samples = integer(r.at("samples"), "config.rpwf.samples");
    if (c.rpwf.samples < 1) fail("config.rpwf.samples", "must be at least 1");
    if (r.contains("seed")) c.rpwf.seed = seed(r.at("seed"), "config.rpwf.seed");
  }
  if (j.contains("optimizer")) c.optimizer = optimizer(j.at("optimizer"), "config.optimizer");

  // cross-field rules
  const bool pure_like = c.initial.kind == InitialKind::pure || c.initial.kind == InitialKind::unknown_pure;
  if (c.initial.kind == InitialKind::unknown_pure) {
    for (const auto& p : c.pulses) {
      if (p.strength.free) fail("config.pulses", "kick strengths cannot be inferred when the state amplitudes are unknown");
    }
    if (!c.pulses.empty()) fail("config.pulses", "with an unknown pure state the amplitudes already include the preparation; remove the pulses");
  }
  if (c.rpwf.enabled && pure_like) fail("config.rpwf", "RPWF applies to ensembles only");
  if (c.initial.temperature.free && c.inertia.free) fail("config", "a free temperature cannot be combined with a free moment of inertia");
  if (c.inertia.free && c.pulses.size() > 1) {
    for (std::size_t k = 1; k < c.pulses.size(); ++k) {
      if (c.pulses[k].delay > 0.0) fail("config", "a free moment of inertia cannot be combined with delayed pulses");
    }
  }
  if (c.state_j_max && use == ConfigUse::reconstruct) fail("config.state_j_max", "only meaningful for simulation");
  if (use == ConfigUse::reconstruct && !c.has_unknowns()) fail("config", "nothing to reconstruct: mark at least one parameter unknown");
  return c;
}

inline ScenarioConfig load_scenario(const std::filesystem::path& path, ConfigUse use) {
  return parse_scenario(read_json(path), use, path.parent_path());
}

/// FNV-1a of the canonical JSON dump, hex.
inline std::string config_hash(const json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline json state_label(const RotorState& s) { return {{"J", s.J}, {"M", s.M}}; }

// ---------------------------------------------------------------------------------------------
// simulation

struct SimulationOutput {
  std::vector<Trajectory> clean;
  std::vector<Trajectory> noisy;
  /// ground truth keyed by (J, M) labels, readable by the metrics step
  json truth;
};

namespace scenario_detail {

/// Basis indices and populations of the initial ensemble of a fully known config.
inline std::pair<std::vector<Eigen::Index>, Eigen::VectorXd> known_ensemble(const ScenarioConfig& c) {
  std::vector<Eigen::Index> idx;
  Eigen::VectorXd p;
  switch (c.initial.kind) {
    case InitialKind::pure:
    case InitialKind::ensemble: {
      p.resize(static_cast<Eigen::Index>(c.initial.states.size()));
      for (std::size_t k = 0; k < c.initial.states.size(); ++k) {
        const auto& s = c.initial.states[k];
        idx.push_back(static_cast<Eigen::Index>(c.basis.index(s.J, s.M)));
        p[static_cast<Eigen::Index>(k)] = s.p;
      }
      break;
    }
    case InitialKind::thermal: {
      idx = c.initial.selector.indices(c.basis);
      Eigen::VectorXd h(static_cast<Eigen::Index>(idx.size()));
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const double J = c.basis.state(static_cast<std::size_t>(idx[k])).J;
        h[static_cast<Eigen::Index>(k)] = J * (J + 1.0) / (2.0 * c.inertia.value);
      }
      p = thermal_model(h, c.initial.temperature.value, Eigen::VectorXd::Ones(h.size())).populations;
      break;
    }
    case InitialKind::uniform_random: {
      idx = c.initial.selector.indices(c.basis);
      std::mt19937_64 gen(c.initial.seed);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      p.resize(static_cast<Eigen::Index>(idx.size()));
      for (auto& v : p) v = u(gen);
      p /= p.sum();
      break;
    }
    default: throw ConfigurationError("config: the initial state must be fully known for simulation");
  }
  return {idx, p};
}

inline std::vector<TrajectoryTerm> blank_terms(const ScenarioConfig& c, const Eigen::VectorXd& t) {
  std::vector<TrajectoryTerm> out;
  for (const auto& o : c.observables) out.push_back({Trajectory{o.kind, t, Eigen::VectorXd::Zero(t.size())}, o.weight});
  return out;
}

}  // namespace scenario_detail

/// Forward model of a fully known config: prepared state or ensemble, clean signals, noisy copies.
inline SimulationOutput simulate(const ScenarioConfig& c) {
  if (c.has_unknowns()) throw ConfigurationError("config: simulation needs fully known parameters; remove every 'unknown'");
  const Eigen::VectorXd t = c.time_grid();
  auto [idx, p] = scenario_detail::known_ensemble(c);

  ReconstructionProblem pr;
  pr.basis = c.basis;
  pr.inertia = c.inertia;
  pr.trajectories = scenario_detail::blank_terms(c, t);
  SimulationOutput out;
  out.truth["inertia_au"] = c.inertia.value;
  out.truth["strengths"] = json::array();
  for (const auto& pulse : c.pulses) out.truth["strengths"].push_back(pulse.strength.value);
  if (c.initial.kind == InitialKind::thermal) out.truth["temperature_K"] = c.initial.temperature.value;

  Eigen::MatrixXd signals;
  if (c.initial.kind == InitialKind::pure) {
    // the prepared pure state is the ground truth of an amplitude reconstruction
    Eigen::VectorXcd psi = Eigen::VectorXcd::Zero(c.basis.size());
    psi[idx[0]] = 1.0;
    if (!c.pulses.empty()) {
      ReconstructionProblem prep_pr = pr;
      prep_pr.mode = ModelMode::populations;
      prep_pr.pulses = c.pulses;
      prep_pr.sources = idx;
      prep_pr.populations = p;
      const Evaluator prep_ev(prep_pr);
      psi = block_column(prep_ev.preparation(nominal_parameters(prep_pr).P, c.inertia.value).total, idx[0]);
    }
    if (c.state_j_max) {
      for (Eigen::Index n = 0; n < psi.size(); ++n) {
        if (c.basis.state(static_cast<std::size_t>(n)).J > *c.state_j_max) psi[n] = 0.0;
      }
    }
    if (psi.norm() == 0.0) throw ConfigurationError("config.state_j_max: removes the whole prepared state");
    psi.normalize();
    pr.mode = ModelMode::amplitudes;
    pr.members = 1;
    pr.amplitudes_free = false;
    pr.amplitudes = psi;
    pr.populations = Eigen::VectorXd::Ones(1);
    signals = Evaluator(pr).model_signals(nominal_parameters(pr));
    json amps = json::array();
    for (Eigen::Index n = 0; n < psi.size(); ++n) {
      if (psi[n] == cd(0.0)) continue;
      json e = state_label(c.basis.state(static_cast<std::size_t>(n)));
      e["re"] = psi[n].real();
      e["im"] = psi[n].imag();
      amps.push_back(e);
    }
    out.truth["amplitudes"] = json::array({amps});
  } else {
    if (c.state_j_max) throw ConfigurationError("config.state_j_max: only meaningful for a pure initial state");
    pr.mode = ModelMode::populations;
    pr.pulses = c.pulses;
    pr.sources = idx;
    pr.populations = p;
    pr.rpwf = c.rpwf;
    signals = Evaluator(pr).model_signals(nominal_parameters(pr));
    json pops = json::array();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      json e = state_label(c.basis.state(static_cast<std::size_t>(idx[k])));
      e["p"] = p[static_cast<Eigen::Index>(k)];
      pops.push_back(e);
    }
    out.truth["populations"] = pops;
  }
  for (std::size_t o = 0; o < c.observables.size(); ++o) {
    Trajectory tr{c.observables[o].kind, t, signals.col(static_cast<Eigen::Index>(o))};
    out.clean.push_back(tr);
    if (c.noise_level > 0.0) out.noisy.push_back(add_noise(tr, c.noise_level, c.noise_seed + o));
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// reconstruction

inline std::filesystem::path resolve(const ScenarioConfig& c, const std::string& file) {
  const std::filesystem::path p(file);
  return p.is_absolute() ? p : c.directory / p;
}

/// Problem for a reconstruct config; references come from `refs` or, when empty, from the files.
inline ReconstructionProblem build_problem(const ScenarioConfig& c, std::vector<Trajectory> refs = {}) {
  if (refs.empty()) {
    for (const auto& o : c.observables) refs.push_back(read_trajectory_csv(resolve(c, o.file), o.kind));
  }
  if (refs.size() != c.observables.size()) throw InputError("one reference trajectory per observable is required");
  for (std::size_t o = 0; o < refs.size(); ++o) {
    if (refs[o].kind != c.observables[o].kind) throw InputError("reference trajectory kinds do not match the observables");
  }
  if (c.has_time_grid && !c.inertia.free) {
    const Eigen::VectorXd t = c.time_grid();
    for (const auto& r : refs) {
      if (r.times.size() != t.size() || (r.times - t).cwiseAbs().maxCoeff() > 1e-9 * std::max(1.0, t.cwiseAbs().maxCoeff())) {
        throw InputError("reference trajectory grid does not match config.time_grid");
      }
    }
  }
  ReconstructionProblem pr;
  pr.basis = c.basis;
  pr.inertia = c.inertia;
  pr.ridge = c.ridge;
  for (std::size_t o = 0; o < refs.size(); ++o) pr.trajectories.push_back({refs[o], c.observables[o].weight});
  switch (c.initial.kind) {
    case InitialKind::unknown_pure: {
      pr.mode = ModelMode::amplitudes;
      pr.members = c.initial.members;
      pr.support = Eigen::VectorXd::Zero(pr.dim());
      for (auto n : c.initial.selector.indices(c.basis)) pr.support[n] = 1.0;
      pr.populations_free = c.initial.members > 1;
      if (!pr.populations_free) pr.populations = Eigen::VectorXd::Ones(1);
      break;
    }
    case InitialKind::unknown_populations:
      pr.mode = ModelMode::populations;
      pr.pulses = c.pulses;
      pr.sources = c.initial.selector.indices(c.basis);
      pr.populations_free = true;
      pr.rpwf = c.rpwf;
      break;
    case InitialKind::thermal:
      pr.mode = ModelMode::temperature;
      pr.pulses = c.pulses;
      pr.sources = c.initial.selector.indices(c.basis);
      pr.temperature = c.initial.temperature;
      pr.thermal_parity = c.initial.selector.parity;
      pr.rpwf = c.rpwf;
      break;
    case InitialKind::pure:
    case InitialKind::ensemble:
    case InitialKind::uniform_random: {
      auto [idx, p] = scenario_detail::known_ensemble(c);
      pr.mode = ModelMode::populations;
      pr.pulses = c.pulses;
      pr.sources = idx;
      pr.populations = p;
      pr.rpwf = c.rpwf;
      break;
    }
  }
  try {
    pr.validate();
  } catch (const ConfigurationError& e) {
    throw ConfigurationError(std::string("config: ") + e.what());
  }
  return pr;
}

// ---------------------------------------------------------------------------------------------
// comparison with ground truth

struct TruthComparison {
  json metrics;
};

namespace scenario_detail {

inline std::map<std::pair<int, int>, cd> truth_amplitudes(const json& truth, std::size_t member) {
  std::map<std::pair<int, int>, cd> out;
  const auto& list = truth.at("amplitudes").at(member);
  for (const auto& e : list) out[{e.at("J").get<int>(), e.at("M").get<int>()}] = cd(e.at("re").get<double>(), e.at("im").get<double>());
  return out;
}

inline std::map<std::pair<int, int>, double> truth_populations(const json& truth) {
  std::map<std::pair<int, int>, double> out;
  for (const auto& e : truth.at("populations")) out[{e.at("J").get<int>(), e.at("M").get<int>()}] = e.at("p").get<double>();
  return out;
}

}  // namespace scenario_detail

/// Coefficients whose true magnitude is below this carry no meaningful phase.
inline constexpr double kPhaseMagnitudeFloor = 1e-2;

struct AmplitudeErrors {
  double norm_max = 0.0;
  double phase_max = 0.0;
  double coefficient_max = 0.0;
};

/// Gauge-fixed comparison of a recovered state with a labelled truth; states missing on either
/// side count as zero amplitude.
inline AmplitudeErrors compare_amplitudes(const RotorBasis& basis, const Eigen::VectorXcd& psi, std::map<std::pair<int, int>, cd> truth) {
  Eigen::VectorXcd t_vec(static_cast<Eigen::Index>(truth.size()));
  std::vector<std::pair<int, int>> keys;
  for (const auto& [k, v] : truth) {
    t_vec[static_cast<Eigen::Index>(keys.size())] = v;
    keys.push_back(k);
  }
  const Eigen::VectorXcd g = gauge_fix(psi);
  // gauge of the truth: same convention, on its own largest coefficient
  const Eigen::VectorXcd tg = gauge_fix(t_vec);
  // align the recovered phase to the truth's reference coefficient so both use the same anchor
  Eigen::Index anchor = 0;
  t_vec.cwiseAbs().maxCoeff(&anchor);
  const auto [aJ, aM] = keys[static_cast<std::size_t>(anchor)];
  Eigen::VectorXcd r = g;
  if (auto ai = basis.find(aJ, aM); ai && std::abs(g[static_cast<Eigen::Index>(*ai)]) > 0.0) {
    r = g * std::polar(1.0, -std::arg(g[static_cast<Eigen::Index>(*ai)]));
  }
  AmplitudeErrors e;
  std::set<std::size_t> matched;
  for (std::size_t k = 0; k < keys.size(); ++k) {
    const cd tv = tg[static_cast<Eigen::Index>(k)];
    cd rv = 0.0;
    if (auto n = basis.find(keys[k].first, keys[k].second)) {
      rv = r[static_cast<Eigen::Index>(*n)];
      matched.insert(*n);
    }
    e.norm_max = std::max(e.norm_max, std::abs(std::abs(rv) - std::abs(tv)));
    e.coefficient_max = std::max(e.coefficient_max, std::abs(rv - tv));
    if (std::abs(tv) >= kPhaseMagnitudeFloor) e.phase_max = std::max(e.phase_max, std::abs(std::arg(rv * std::conj(tv))));
  }
  for (Eigen::Index n = 0; n < r.size(); ++n) {
    if (matched.count(static_cast<std::size_t>(n))) continue;
    e.norm_max = std::max(e.norm_max, std::abs(r[n]));
    e.coefficient_max = std::max(e.coefficient_max, std::abs(r[n]));
  }
  return e;
}

struct PopulationErrors {
  double l1 = 0.0;
  /// after summing over M within each J
  double l1_by_J = 0.0;
  /// after summing each +M / -M pair
  double l1_by_abs_M = 0.0;
  double max_relative = 0.0;
};

inline PopulationErrors compare_populations(const ReconstructionProblem& pr, const Eigen::VectorXd& p,
                                            const std::map<std::pair<int, int>, double>& truth) {
  PopulationErrors e;
  std::map<std::pair<int, int>, double> got;
  for (std::size_t k = 0; k < pr.sources.size(); ++k) {
    const auto& s = pr.basis.state(static_cast<std::size_t>(pr.sources[k]));
    got[{s.J, s.M}] += p[static_cast<Eigen::Index>(k)];
  }
  std::set<std::pair<int, int>> keys;
  for (const auto& [k, _] : got) keys.insert(k);
  for (const auto& [k, _] : truth) keys.insert(k);
  std::map<int, double> by_j;
  std::map<std::pair<int, int>, double> by_abs_m;
  for (const auto& k : keys) {
    const double a = got.count(k) ? got.at(k) : 0.0;
    const double b = truth.count(k) ? truth.at(k) : 0.0;
    e.l1 += std::abs(a - b);
    if (b > 0.0) e.max_relative = std::max(e.max_relative, std::abs(a - b) / b);
    by_j[k.first] += a - b;
    by_abs_m[{k.first, std::abs(k.second)}] += a - b;
  }
  for (const auto& [_, v] : by_j) e.l1_by_J += std::abs(v);
  for (const auto& [_, v] : by_abs_m) e.l1_by_abs_M += std::abs(v);
  return e;
}

/// Metrics of a reconstruction against a simulate-generated truth document.
inline json compare_with_truth(const ReconstructionProblem& pr, const ParameterVector& x, const json& truth) {
  json m;
  if (pr.mode == ModelMode::amplitudes && truth.contains("amplitudes")) {
    json members = json::array();
    for (Eigen::Index j = 0; j < pr.members && j < static_cast<Eigen::Index>(truth.at("amplitudes").size()); ++j) {
      const auto e = compare_amplitudes(pr.basis, x.psi(j, pr.dim()), scenario_detail::truth_amplitudes(truth, static_cast<std::size_t>(j)));
      members.push_back({{"norm_max_error", e.norm_max}, {"phase_max_error_rad", e.phase_max}, {"coefficient_max_error", e.coefficient_max}});
    }
    m["amplitudes"] = members;
    m["phase_magnitude_floor"] = kPhaseMagnitudeFloor;
  }
  if (pr.mode != ModelMode::amplitudes && truth.contains("populations")) {
    const Eigen::VectorXd p = Evaluator(pr).effective_populations(x);
    const auto e = compare_populations(pr, p, scenario_detail::truth_populations(truth));
    m["populations"] = {{"l1_error", e.l1}, {"l1_error_J_summed", e.l1_by_J}, {"l1_error_abs_M_summed", e.l1_by_abs_M},
                        {"max_relative_error", e.max_relative}};
  }
  if (pr.mode == ModelMode::temperature && truth.contains("temperature_K")) {
    const double T = truth.at("temperature_K").get<double>();
    m["temperature"] = {{"abs_error_K", std::abs(x.T - T)}, {"relative_error", std::abs(x.T - T) / T}};
  }
  if (pr.inertia.free && truth.contains("inertia_au")) {
    const double I = truth.at("inertia_au").get<double>();
    m["inertia"] = {{"abs_error_au", std::abs(x.I - I)}, {"relative_error", std::abs(x.I - I) / I}};
  }
  if (x.active.P && truth.contains("strengths")) {
    json ps = json::array();
    for (Eigen::Index k = 0; k < x.P.size() && k < static_cast<Eigen::Index>(truth.at("strengths").size()); ++k) {
      const double P = truth.at("strengths").at(static_cast<std::size_t>(k)).get<double>();
      ps.push_back({{"abs_error", std::abs(x.P[k] - P)}, {"relative_error", P != 0.0 ? std::abs(x.P[k] - P) / std::abs(P) : 0.0}});
    }
    m["strengths"] = ps;
  }
  return m;
}

/// Distance to truth used in the per-iteration trace: max amplitude error, population L1, or
/// the largest relative scalar error, whichever applies.
inline TruthMetric truth_metric(const ReconstructionProblem& pr, const json& truth) {
  return [pr, truth](const ParameterVector& x) {
    const json m = compare_with_truth(pr, x, truth);
    double v = 0.0;
    if (m.contains("amplitudes")) {
      for (const auto& e : m.at("amplitudes")) v = std::max(v, e.at("coefficient_max_error").get<double>());
    }
    if (m.contains("populations")) v = std::max(v, m.at("populations").at("l1_error").get<double>());
    for (const char* k : {"temperature", "inertia"}) {
      if (m.contains(k)) v = std::max(v, m.at(k).at("relative_error").get<double>());
    }
    if (m.contains("strengths")) {
      for (const auto& e : m.at("strengths")) v = std::max(v, e.at("relative_error").get<double>());
    }
    return v;
  };
}

/// Recovered parameters with state labels.
inline json parameters_json(const ReconstructionProblem& pr, const ParameterVector& x) {
  json r;
  if (pr.mode == ModelMode::amplitudes) {
    json members = json::array();
    for (Eigen::Index j = 0; j < pr.members; ++j) {
      const Eigen::VectorXcd psi = x.psi(j, pr.dim());
      json amps = json::array();
      for (Eigen::Index n = 0; n < psi.size(); ++n) {
        if (pr.support.size() != 0 && pr.support[n] == 0.0) continue;
        json e = state_label(pr.basis.state(static_cast<std::size_t>(n)));
        e["re"] = psi[n].real();
        e["im"] = psi[n].imag();
        amps.push_back(e);
      }
      members.push_back(amps);
    }
    r["amplitudes"] = members;
    if (pr.members > 1) r["member_weights"] = std::vector<double>(x.p.data(), x.p.data() + x.p.size());
  } else {
    const Eigen::VectorXd p = Evaluator(pr).effective_populations(x);
    json pops = json::array();
    for (std::size_t k = 0; k < pr.sources.size(); ++k) {
      json e = state_label(pr.basis.state(static_cast<std::size_t>(pr.sources[k])));
      e["p"] = p[static_cast<Eigen::Index>(k)];
      pops.push_back(e);
    }
    r["populations"] = pops;
    r["strengths"] = std::vector<double>(x.P.data(), x.P.data() + x.P.size());
  }
  r["inertia_au"] = x.I;
  if (pr.mode == ModelMode::temperature) r["temperature_K"] = x.T;
  return r;
}

// ---------------------------------------------------------------------------------------------
// presets

struct Preset {
  std::string name;
  std::string description;
  json simulate;
  json reconstruct;
};

namespace preset_detail {

inline json au(double v) { return {{"value", v}, {"unit", "au"}}; }
inline json unknown(double lo, double hi, double guess, const char* unit) {
  return {{"unknown", true}, {"bounds", {lo, hi}}, {"guess", guess}, {"unit", unit}};
}
inline json files(const std::string& name, const std::vector<std::string>& kinds, bool noisy) {
  json out = json::array();
  for (const auto& k : kinds) out.push_back({{"kind", k}, {"file", name + "_" + k + (noisy ? "_noisy" : "") + ".csv"}});
  return out;
}

inline constexpr double kInertia = 539010.0;

}  // namespace preset_detail

/// Built-in scenarios. Each simulate document produces the files its reconstruct document reads.
inline std::vector<Preset> presets() {
  using namespace preset_detail;
  const json grid = {{"count", 500}, {"span", {{"value", 1.0}, {"unit", "revival"}}}};
  std::vector<Preset> out;

  {
    Preset p{"fig1", "pure kicked state from a noisy <cos^2 theta> trace (P = 8.278, 3% noise)", {}, {}};
    p.simulate = {{"name", "fig1"},
                  {"basis", {{"j_max", 22}, {"parity", "all_J"}}},
                  {"inertia", au(kInertia)},
                  {"pulses", {{{"polarization", "Z"}, {"strength", 8.278}}}},
                  {"initial_state", {{"kind", "pure"}, {"J", 0}, {"M", 0}}},
                  {"observables", {"cos2_theta"}},
                  {"time_grid", grid},
                  {"noise", {{"level", 0.03}, {"seed", 7}}}};
    p.reconstruct = {{"name", "fig1"},
                     {"basis", {{"j_max", 22}, {"parity", "all_J"}}},
                     {"inertia", au(kInertia)},
                     {"initial_state", {{"kind", "unknown_pure"}, {"support", {{"j_max", 18}, {"parity", "even_J_only"}, {"m", {0}}}}}},
                     {"observables", files("fig1", {"cos2_theta"}, true)},
                     {"time_grid", grid},
                     {"ridge", 1e-4},
                     {"optimizer", {{"max_iterations", 5000}, {"seed", 1}}}};
    out.push_back(p);
  }
  {
    Preset p{"fig2a", "3003 uniform-random populations (even J <= 76) recovered with RPWF, N = 30", {}, {}};
    const json sources = {{"j_max", 76}, {"parity", "even_J_only"}};
    p.simulate = {{"name", "fig2a"},
                  {"basis", {{"j_max", 100}, {"parity", "even_J_only"}}},
                  {"inertia", au(kInertia)},
                  {"pulses", {{{"polarization", "Z"}, {"strength", 5.0}}}},
                  {"initial_state", {{"kind", "uniform_random"}, {"sources", sources}, {"seed", 5}}},
                  {"observables", {"cos2_theta"}},
                  {"time_grid", grid}};
    p.reconstruct = {{"name", "fig2a"},
                     {"basis", {{"j_max", 100}, {"parity", "even_J_only"}}},
                     {"inertia", au(kInertia)},
                     {"pulses", {{{"polarization", "Z"}, {"strength", 5.0}}}},
                     {"initial_state", {{"kind", "unknown_populations"}, {"sources", sources}}},
                     {"observables", files("fig2a", {"cos2_theta"}, false)},
                     {"time_grid", grid},
                     {"rpwf", {{"enabled", true}, {"samples", 30}, {"seed", 17}}},
                     {"optimizer", {{"max_iterations", 50}, {"seed", 1}}}};
    out.push_back(p);
  }
  {
    Preset p{"fig3", "temperature of a 300 K thermal ensemble (even J <= 76)", {}, {}};
    const json sources = {{"j_max", 76}, {"parity", "even_J_only"}};
    p.simulate = {{"name", "fig3"},
                  {"basis", {{"j_max", 100}, {"parity", "even_J_only"}}},
                  {"inertia", au(kInertia)},
                  {"pulses", {{{"polarization", "Z"}, {"strength", 5.0}}}},
                  {"initial_state", {{"kind", "thermal"}, {"temperature", {{"value", 300.0}, {"unit", "K"}}}, {"sources", sources}}},
                  {"observables", {"cos2_theta"}},
                  {"time_grid", grid}};
    p.reconstruct = {{"name", "fig3"},
                     {"basis", {{"j_max", 100}, {"parity", "even_J_only"}}},
                     {"inertia", au(kInertia)},
                     {"pulses", {{{"polarization", "Z"}, {"strength", 5.0}}}},
                     {"initial_state", {{"kind", "thermal"}, {"temperature", unknown(10.0, 1000.0, 200.0, "K")}, {"sources", sources}}},
                     {"observables", files("fig3", {"cos2_theta"}, false)},
                     {"time_grid", grid},
                     {"optimizer", {{"max_iterations", 200}, {"seed", 1}}}};
    out.push_back(p);
  }
  {
    Preset p{"fig4", "X pulse, then an XY45 pulse after an eighth of a revival; three observables", {}, {}};
    const std::vector<std::string> kinds{"cos2_theta", "cos2_phi", "sin2theta_sin2phi"};
    p.simulate = {{"name", "fig4"},
                  {"basis", {{"j_max", 16}, {"parity", "all_J"}}},
                  {"inertia", au(kInertia)},
                  {"pulses",
                   {{{"polarization", "X"}, {"strength", 2.5}},
                    {{"polarization", "XY45"}, {"strength", 2.5}, {"delay", {{"value", 0.125}, {"unit", "revival"}}}}}},
                  {"initial_state", {{"kind", "pure"}, {"J", 0}, {"M", 0}}},
                  {"state_j_max", 10},
                  {"observables", kinds},
                  {"time_grid", grid}};
    p.reconstruct = {{"name", "fig4"},
                     {"basis", {{"j_max", 10}, {"parity", "all_J"}}},
                     {"inertia", au(kInertia)},
                     {"initial_state",
                      {{"kind", "unknown_pure"}, {"support", {{"j_max", 10}, {"parity", "even_J_only"}, {"m_parity", "even"}}}}},
                     {"observables", files("fig4", kinds, false)},
                     {"time_grid", grid},
                     {"optimizer", {{"max_iterations", 10000}, {"seed", 1}}}};
    out.push_back(p);
  }
  {
    Preset p{"fig5", "P = 5.174 and I = 539010 a.u. with J = 0 / J = 2 populations from <cos^2 theta>", {}, {}};
    json states = json::array({{{"J", 0}, {"M", 0}, {"p", 0.5}}});
    for (int M = -2; M <= 2; ++M) states.push_back({{"J", 2}, {"M", M}, {"p", 0.1}});
    p.simulate = {{"name", "fig5"},
                  {"basis", {{"j_max", 20}, {"parity", "even_J_only"}}},
                  {"inertia", au(kInertia)},
                  {"pulses", {{{"polarization", "Z"}, {"strength", 5.174}}}},
                  {"initial_state", {{"kind", "ensemble"}, {"states", states}}},
                  {"observables", {"cos2_theta"}},
                  {"time_grid", grid}};
    p.reconstruct = {{"name", "fig5"},
                     {"basis", {{"j_max", 20}, {"parity", "even_J_only"}}},
                     {"inertia", unknown(500000.0, 580000.0, 530000.0, "au")},
                     {"pulses", {{{"polarization", "Z"}, {"strength", {{"unknown", true}, {"bounds", {3.0, 7.0}}, {"guess", 5.0}}}}}},
                     {"initial_state", {{"kind", "unknown_populations"}, {"sources", {{"j_max", 2}, {"parity", "even_J_only"}}}}},
                     {"observables", files("fig5", {"cos2_theta"}, false)},
                     {"optimizer", {{"max_iterations", 2000}, {"seed", 1}, {"scales", {{"inertia", 0.01}}}}}};
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// file-level drivers

inline std::string trajectory_stem(const ScenarioConfig& c, ObservableKind k) { return c.name + "_" + std::string(to_string(k)); }

/// Writes clean (and noisy) CSVs with JSON sidecars plus <name>_truth.json; returns the paths.
inline std::vector<std::filesystem::path> write_simulation(const ScenarioConfig& c, const std::filesystem::path& dir) {
  const SimulationOutput sim = simulate(c);
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> files;
  const json generation = {{"config_hash", config_hash(c.source)}, {"version", kVersion}, {"config", c.source}};
  const auto emit = [&](const Trajectory& tr, const std::string& stem) {
    write_trajectory_csv(dir / (stem + ".csv"), tr);
    write_json(dir / (stem + ".json"), trajectory_sidecar(tr, c.basis, generation));
    files.push_back(dir / (stem + ".csv"));
  };
  for (const auto& tr : sim.clean) emit(tr, trajectory_stem(c, tr.kind));
  for (const auto& tr : sim.noisy) emit(tr, trajectory_stem(c, tr.kind) + "_noisy");
  write_json(dir / (c.name + "_truth.json"), sim.truth);
  files.push_back(dir / (c.name + "_truth.json"));
  return files;
}

struct ReconstructionRun {
  ReconstructionProblem problem;
  ReconstructionResult result;
  json bundle;
};

/// Runs a reconstruct config and writes <name>_result.json, <name>_trace.jsonl and one
/// <name>_model_<kind>.csv per observable. The truth document is read only when given.
inline ReconstructionRun run_reconstruction(const ScenarioConfig& c, const std::filesystem::path& dir, const std::optional<json>& truth = {}) {
  ReconstructionRun run;
  run.problem = build_problem(c);
  const Evaluator ev(run.problem);
  run.result = minimize(ev, c.optimizer, std::nullopt, truth ? truth_metric(run.problem, *truth) : TruthMetric{});
  std::filesystem::create_directories(dir);
  const auto trace_path = dir / (c.name + "_trace.jsonl");
  write_trace_jsonl(trace_path.string(), run.result.trace);

  json files = json::array();
  const Eigen::MatrixXd model = run.result.final.model;
  for (std::size_t o = 0; o < c.observables.size(); ++o) {
    const Trajectory tr{c.observables[o].kind, ev.times(), model.col(static_cast<Eigen::Index>(o))};
    const auto path = dir / (c.name + "_model_" + std::string(to_string(tr.kind)) + ".csv");
    write_trajectory_csv(path, tr);
    files.push_back(path.filename().string());
  }
  const auto& last = run.result.trace.records.back();
  json& b = run.bundle;
  b["name"] = c.name;
  b["status"] = std::string(to_string(run.result.trace.status));
  b["reason"] = run.result.trace.reason;
  b["iterations"] = last.iteration;
  b["E"] = run.result.final.E;
  b["target_error"] = std::sqrt(run.result.final.misfit);
  b["parameters"] = parameters_json(run.problem, run.result.x);
  b["trace"] = trace_path.filename().string();
  b["model_trajectories"] = files;
  if (truth) b["metrics"] = compare_with_truth(run.problem, run.result.x, *truth);
  b["provenance"] = {{"config_hash", config_hash(c.source)},
                     {"version", kVersion},
                     {"optimizer_seed", c.optimizer.seed},
                     {"rpwf_seed", c.rpwf.seed},
                     {"boltzmann_hartree_per_kelvin", kBoltzmannHartreePerKelvin},
                     {"config", c.source}};
  write_json(dir / (c.name + "_result.json"), b);
  return run;
}

struct GradcheckOptions {
  std::optional<ParameterBlock> block;
  /// per block; spread evenly over the free components
  int max_components = 40;
  double tolerance = 1e-6;
  /// test hook: perturbs the analytic gradient so the check must fail
  bool corrupt_gradient = false;
  std::uint64_t seed = 1;
};

struct GradcheckRow {
  ParameterBlock block;
  bool active = false;
  Eigen::Index components = 0;
  double relative_error = 0.0;
  bool pass = true;
};

/// Analytic gradient against central differences at a random feasible start.
inline std::vector<GradcheckRow> gradcheck(const ReconstructionProblem& pr, const GradcheckOptions& opt) {
  if (opt.max_components < 1) throw InputError("max-components must be at least 1");
  const Evaluator ev(pr);
  const ParameterVector x = initialize(pr, opt.seed);
  const GradientBundle g = ev.evaluate(x);
  std::vector<GradcheckRow> rows;
  for (auto blk : {ParameterBlock::a, ParameterBlock::b, ParameterBlock::p, ParameterBlock::P, ParameterBlock::I, ParameterBlock::T}) {
    if (opt.block && *opt.block != blk) continue;
    GradcheckRow row{blk};
    row.active = x.active[blk];
    if (!row.active) {
      rows.push_back(row);
      continue;
    }
    std::vector<Eigen::Index> free;
    const Eigen::Index n = x.block(blk).size();
    for (Eigen::Index i = 0; i < n; ++i) {
      const bool on_support = (blk != ParameterBlock::a && blk != ParameterBlock::b) || pr.support.size() == 0 || pr.support[i % pr.dim()] != 0.0;
      if (on_support) free.push_back(i);
    }
    std::vector<Eigen::Index> pick;
    const auto count = std::min<std::size_t>(free.size(), static_cast<std::size_t>(opt.max_components));
    for (std::size_t k = 0; k < count; ++k) pick.push_back(free[k * free.size() / count]);
    const FdResult fd = finite_difference_oracle(ev, x, blk, default_fd_step(blk, x), default_fd_order(blk), pick);
    Eigen::VectorXd analytic(static_cast<Eigen::Index>(pick.size())), numeric(static_cast<Eigen::Index>(pick.size()));
    const Eigen::VectorXd full = g.block(blk);
    for (std::size_t k = 0; k < pick.size(); ++k) {
      analytic[static_cast<Eigen::Index>(k)] = full[pick[k]];
      numeric[static_cast<Eigen::Index>(k)] = fd.gradient[pick[k]];
    }
    if (opt.corrupt_gradient) analytic[0] = analytic[0] * 1.01 + 1e-3 * std::max(analytic.norm(), 1.0);
    row.components = static_cast<Eigen::Index>(pick.size());
    row.relative_error = (analytic - numeric).norm() / std::max(numeric.norm(), 1e-300);
    row.pass = row.relative_error < opt.tolerance;
    rows.push_back(row);
  }
  return rows;
}

inline const Preset& find_preset(const std::string& name) {
  static const std::vector<Preset> all = presets();
  for (const auto& p : all) {
    if (p.name == name) return p;
  }
  throw InputError("no preset named '" + name + "'");
}

}  // namespace rotor_tomo
