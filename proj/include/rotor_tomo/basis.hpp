#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rotor_tomo/errors.hpp"

namespace rotor_tomo {

enum class ParityFilter { all_J, even_J_only };

inline std::string_view to_string(ParityFilter p) {
  return p == ParityFilter::all_J ? "all_J" : "even_J_only";
}

inline ParityFilter parse_parity(std::string_view s) {
  if (s == "all_J" || s == "all") return ParityFilter::all_J;
  if (s == "even_J_only" || s == "even") return ParityFilter::even_J_only;
  throw InputError("unknown parity filter '" + std::string(s) + "' (expected all_J or even_J_only)");
}

struct RotorState {
  int J = 0;
  int M = 0;
  friend bool operator==(const RotorState&, const RotorState&) = default;
};

/// Ordered |J,M> basis: increasing J, then increasing M within each J.
class RotorBasis {
 public:
  RotorBasis() : RotorBasis(0, ParityFilter::all_J) {}

  RotorBasis(int j_max, ParityFilter parity) : j_max_(j_max), parity_(parity) {
    if (j_max < 0) throw InputError("j_max must be non-negative");
    offsets_.assign(static_cast<std::size_t>(j_max) + 1, -1);
    for (int J = 0; J <= j_max; ++J) {
      if (!admits(J)) continue;
      offsets_[J] = static_cast<int>(states_.size());
      for (int M = -J; M <= J; ++M) states_.push_back({J, M});
    }
  }

  int j_max() const { return j_max_; }
  ParityFilter parity() const { return parity_; }
  std::size_t size() const { return states_.size(); }

  bool admits(int J) const {
    return J >= 0 && J <= j_max_ && (parity_ == ParityFilter::all_J || J % 2 == 0);
  }

  bool contains(int J, int M) const { return admits(J) && M >= -J && M <= J; }

  /// Flat index of |J,M>; throws if the state is not admitted.
  std::size_t index(int J, int M) const {
    if (!contains(J, M)) {
      throw InputError("state |" + std::to_string(J) + "," + std::to_string(M) +
                       "> is not in the basis");
    }
    return static_cast<std::size_t>(offsets_[J] + (M + J));
  }

  std::optional<std::size_t> find(int J, int M) const {
    if (!contains(J, M)) return std::nullopt;
    return static_cast<std::size_t>(offsets_[J] + (M + J));
  }

  const RotorState& state(std::size_t i) const { return states_.at(i); }
  const std::vector<RotorState>& states() const { return states_; }

  friend bool operator==(const RotorBasis& a, const RotorBasis& b) {
    return a.j_max_ == b.j_max_ && a.parity_ == b.parity_;
  }

 private:
  int j_max_;
  ParityFilter parity_;
  std::vector<int> offsets_;
  std::vector<RotorState> states_;
};

inline RotorBasis build_basis(int j_max, ParityFilter parity) { return RotorBasis(j_max, parity); }

}  // namespace rotor_tomo
