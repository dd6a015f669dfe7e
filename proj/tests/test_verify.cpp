#include "fsf/verify.hpp"

#include <gtest/gtest.h>

namespace fsf {
namespace {

const VerifyReport& clean_report() {
  static const VerifyReport rep = run_verify();
  return rep;
}

TEST(Verify, CleanBuildPassesEveryCheck) {
  const auto& rep = clean_report();
  EXPECT_EQ(rep.checks.size(), 26u);
  for (const auto& c : rep.checks) EXPECT_TRUE(c.passed) << c.name << ": " << c.measured << " vs " << c.tolerance;
  EXPECT_TRUE(rep.passed());
  EXPECT_EQ(rep.to_json().at("checks").size(), rep.checks.size());
}

TEST(Verify, EachCanaryTripsItsCheck) {
  const std::map<std::string, std::string> expected{
      {"score-sign", "score-velocity"}, {"drop-sg", "fsf-gradient-form"}, {"drop-reorder", "time-sampler-order"}};
  ASSERT_EQ(canary_names().size(), expected.size());
  for (const auto& name : canary_names()) {
    const auto rep = run_verify(canary_hooks(name));
    EXPECT_FALSE(rep.passed()) << name;
    bool tripped = false;
    for (const auto& c : rep.checks) tripped |= c.name == expected.at(name) && !c.passed;
    EXPECT_TRUE(tripped) << name;
  }
  EXPECT_THROW(canary_hooks("bogus"), std::invalid_argument);
}

TEST(Verify, FiniteDifferencesSeeStopGradient) {
  // x * sg(x): analytic 3 at x = 3; finite differences with the branch replayed agree.
  ParamStore p;
  p.add("x", Matrix::Constant(1, 1, 3.0));
  const auto cmp = compare_with_finite_differences([](const ParamStore& q) { return sum(q.at("x") * stop_gradient(q.at("x"))); }, p);
  EXPECT_LT(cmp.relative_error, 1e-8);
  EXPECT_NEAR(cmp.analytic_norm, 3.0, 1e-12);
}

}  // namespace
}  // namespace fsf
