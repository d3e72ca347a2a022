#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rotor_tomo/dynamics.hpp"
#include "rotor_tomo/errors.hpp"

namespace rotor_tomo {

inline std::string format17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// CSV with header `t,value`, times in atomic units, 17 significant digits.
inline void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& traj) {
  traj.validate();
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "t,value\n";
  for (Eigen::Index c = 0; c < traj.size(); ++c) out << format17(traj.times[c]) << ',' << format17(traj.values[c]) << '\n';
  if (!out) throw InputError("write failed for " + path.string());
}

inline Trajectory read_trajectory_csv(const std::filesystem::path& path, ObservableKind kind) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read trajectory file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("t,value", 0) != 0) throw InputError(path.string() + ": expected header `t,value`");
  std::vector<double> t, v;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw InputError(path.string() + ":" + std::to_string(lineno) + ": missing comma");
    try {
      std::size_t used = 0;
      t.push_back(std::stod(line.substr(0, comma), &used));
      v.push_back(std::stod(line.substr(comma + 1), &used));
    } catch (const std::logic_error&) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": not a number");
    }
  }
  Trajectory traj;
  traj.kind = kind;
  traj.times = Eigen::Map<Eigen::VectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
  traj.values = Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  traj.validate();
  return traj;
}

inline nlohmann::json trajectory_sidecar(const Trajectory& traj, const RotorBasis& basis, const nlohmann::json& generation) {
  return {
      {"observable_kind", std::string(to_string(traj.kind))},
      {"points", traj.size()},
      {"time_unit", "au"},
      {"noise_level", traj.noise_level},
      {"noise_sigma", traj.noise_sigma},
      {"noise_seed", traj.noise_seed},
      {"basis", {{"j_max", basis.j_max()}, {"parity", std::string(to_string(basis.parity()))}, {"size", basis.size()}}},
      {"generation", generation},
  };
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError(path.string() + ": invalid JSON: " + e.what());
  }
}

}  // namespace rotor_tomo
