#include <gtest/gtest.h>

#include "sfl/ops.hpp"
#include "support/gradcheck.hpp"

using namespace sfl::testing;

class Primitive : public ::testing::TestWithParam<std::size_t> {};

TEST_P(Primitive, MatchesFiniteDifferences) {
  const auto& check = primitive_checks().at(GetParam());
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    auto r = check.run(seed * 7919 + GetParam());
    EXPECT_LT(r.max_rel_error, 1e-3) << check.name << " seed " << seed << " input " << r.worst_input;
  }
}

INSTANTIATE_TEST_SUITE_P(Ops, Primitive, ::testing::Range<std::size_t>(0, primitive_checks().size()),
                         [](const auto& info) { return primitive_checks()[info.param].name; });

TEST(GradCheck, DetectsWrongGradient) {
  // x * x where the tape path is cut for one factor.
  auto r = grad_check([](const std::vector<sfl::Tensor>& x) { return sfl::mul(x[0], x[0].detach()); },
                      {sfl::Tensor::from_vector({3}, std::vector<double>{1.0, -2.0, 0.5})}, 3);
  EXPECT_GT(r.max_rel_error, 0.1);
}
