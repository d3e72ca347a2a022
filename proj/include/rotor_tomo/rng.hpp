#pragma once

#include <cstdint>
#include <numbers>

namespace rotor_tomo {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based uniform in [0,1) keyed by (seed, k, n); no state, so the value does not
/// depend on evaluation order or worker count.
inline double counter_uniform(std::uint64_t seed, std::uint64_t k, std::uint64_t n) {
  const std::uint64_t h = splitmix64(splitmix64(splitmix64(seed) ^ k) ^ (n * 0xd1b54a32d192ed03ULL));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Random phase alpha_k^n in [0, 2 pi).
inline double rpwf_phase(std::uint64_t seed, std::uint64_t sample, std::uint64_t state) {
  return 2.0 * std::numbers::pi * counter_uniform(seed, sample, state);
}

}  // namespace rotor_tomo
