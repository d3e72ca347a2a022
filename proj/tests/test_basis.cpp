#include <gtest/gtest.h>

#include "rotor_tomo/basis.hpp"

using namespace rotor_tomo;

TEST(RotorBasis, SmallestBasisHasOneState) {
  const auto b = build_basis(0, ParityFilter::all_J);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b.index(0, 0), 0u);
}

TEST(RotorBasis, EvenJUpTo76Has3003States) {
  EXPECT_EQ(build_basis(76, ParityFilter::even_J_only).size(), 3003u);
}

TEST(RotorBasis, OrderingIsJThenM) {
  const auto b = build_basis(2, ParityFilter::all_J);
  ASSERT_EQ(b.size(), 9u);
  EXPECT_EQ(b.index(2, -1), 5u);
  EXPECT_EQ(b.state(1), (RotorState{1, -1}));
  EXPECT_EQ(b.state(2), (RotorState{1, 0}));
  EXPECT_EQ(b.state(3), (RotorState{1, 1}));
}

TEST(RotorBasis, SizeFormulaAndRoundTrip) {
  for (int jmax = 0; jmax <= 20; ++jmax) {
    const auto all = build_basis(jmax, ParityFilter::all_J);
    EXPECT_EQ(all.size(), static_cast<std::size_t>((jmax + 1) * (jmax + 1)));
    const auto even = build_basis(jmax, ParityFilter::even_J_only);
    std::size_t expected = 0;
    for (int J = 0; J <= jmax; J += 2) expected += 2 * J + 1;
    EXPECT_EQ(even.size(), expected);
    for (std::size_t i = 0; i < even.size(); ++i) {
      const auto s = even.state(i);
      EXPECT_EQ(even.index(s.J, s.M), i);
    }
  }
}

TEST(RotorBasis, RejectsMissingStatesAndNegativeJmax) {
  const auto even = build_basis(4, ParityFilter::even_J_only);
  EXPECT_THROW(even.index(1, 0), InputError);
  EXPECT_THROW(even.index(2, 3), InputError);
  EXPECT_FALSE(even.find(3, 0).has_value());
  EXPECT_THROW(build_basis(-1, ParityFilter::all_J), InputError);
}
