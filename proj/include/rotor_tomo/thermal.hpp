#pragma once

#include <cmath>

#include <Eigen/Dense>

#include "rotor_tomo/basis.hpp"
#include "rotor_tomo/errors.hpp"
#include "rotor_tomo/operators.hpp"

namespace rotor_tomo {

/// Boltzmann constant, hartree per kelvin (CODATA).
inline constexpr double kBoltzmannHartreePerKelvin = 3.166811563e-6;

struct ThermalModel {
  double temperature = 0.0;
  Eigen::VectorXd populations;
  Eigen::VectorXd dp_dT;
};

namespace detail {
inline void check_temperature(double T) {
  if (!(T > 0.0) || !std::isfinite(T)) throw InputError("temperature must be positive and finite");
}

inline Eigen::VectorXd admitted_mask(const RotorBasis& basis, ParityFilter parity) {
  Eigen::VectorXd mask(static_cast<Eigen::Index>(basis.size()));
  for (std::size_t n = 0; n < basis.size(); ++n) {
    const int J = basis.state(n).J;
    mask[static_cast<Eigen::Index>(n)] = (parity == ParityFilter::even_J_only && J % 2 != 0) ? 0.0 : 1.0;
  }
  return mask;
}
}  // namespace detail

/// p(T) and dp/dT over the given energies; `mask` zeroes excluded states.
inline ThermalModel thermal_model(const Eigen::VectorXd& energies, double T, const Eigen::VectorXd& mask) {
  detail::check_temperature(T);
  if (mask.size() != energies.size()) throw InputError("mask and energies differ in length");
  if (mask.sum() <= 0.0) throw InputError("no admitted states");
  double h_min = INFINITY;
  for (Eigen::Index n = 0; n < energies.size(); ++n) {
    if (mask[n] > 0.0) h_min = std::min(h_min, energies[n]);
  }
  const double kT = kBoltzmannHartreePerKelvin * T;
  ThermalModel m;
  m.temperature = T;
  m.populations = Eigen::VectorXd::Zero(energies.size());
  for (Eigen::Index n = 0; n < energies.size(); ++n) {
    if (mask[n] > 0.0) m.populations[n] = std::exp(-(energies[n] - h_min) / kT);
  }
  m.populations /= m.populations.sum();
  const double mean_h = m.populations.dot(energies);
  m.dp_dT = m.populations.cwiseProduct((energies.array() - mean_h).matrix()) / (kT * T);
  return m;
}

inline ThermalModel thermal_model(const Spectrum& spectrum, double T, ParityFilter parity) {
  return thermal_model(spectrum.energies, T, detail::admitted_mask(spectrum.basis, parity));
}

/// p_{J,M} = exp(-h_J / k_B T) / Z over admitted states.
inline Eigen::VectorXd boltzmann_populations(const Spectrum& spectrum, double T, ParityFilter parity) {
  return thermal_model(spectrum, T, parity).populations;
}

/// dp_j/dT = p_j (h_j - <h>) / (k_B T^2).
inline Eigen::VectorXd population_temperature_derivative(const Spectrum& spectrum, double T, ParityFilter parity) {
  return thermal_model(spectrum, T, parity).dp_dT;
}

/// dE/dT = sum_j dE/dp_j dp_j/dT.
inline double grad_temperature(const Eigen::VectorXd& dE_dp, const ThermalModel& model) {
  if (dE_dp.size() != model.dp_dT.size()) throw InputError("population gradient and thermal model differ in length");
  return dE_dp.dot(model.dp_dT);
}

}  // namespace rotor_tomo
