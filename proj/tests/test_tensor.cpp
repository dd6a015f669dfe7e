#include "fsf/params.hpp"
#include "fsf/verify.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace fsf {
namespace {

TEST(Tensor, StopGradientBranchIsConstant) {
  ParamStore p;
  p.add("x", Matrix::Constant(1, 1, 3.0));
  const Value& x = p.at("x");
  const Value loss = sum(x * stop_gradient(x));
  EXPECT_DOUBLE_EQ(loss.item(), 9.0);
  const GradMap g = backward(loss, p);
  EXPECT_DOUBLE_EQ(g.at("x")(0, 0), 3.0);
}

TEST(Tensor, DetachCarriesNoGradient) {
  ParamStore p;
  p.add("x", Matrix::Constant(2, 2, 1.5));
  const Value loss = sum(square(p.at("x")) * detach(Matrix::Constant(2, 2, 4.0)));
  const GradMap g = backward(loss, p);
  EXPECT_TRUE(g.at("x").isApprox(Matrix::Constant(2, 2, 12.0)));
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  ParamStore p;
  p.add("x", Matrix::Constant(1, 1, 2.0));
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    const Value y = square(p.at("x"));
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(grad_enabled());
}

TEST(Tensor, MlpGradientMatchesCentralDifferences) {
  const auto model = gradient_check_model(0);
  ParamStore params = gradient_check_params(model, 7);
  Rng rng(11);
  const Matrix x = rng.normal_matrix(6, model.dim());
  std::vector<double> t(6), s(6);
  for (int i = 0; i < 6; ++i) {
    t[i] = rng.uniform(0.2, 1.0);
    s[i] = rng.uniform(0.0, t[i]);
  }
  const std::vector<int> labels(6, kNullLabel);
  const auto loss = [&](const ParamStore& p) {
    return sum(model.forward(p, Value::constant(x), t, s, labels));
  };
  const auto cmp = compare_with_finite_differences(loss, params);
  EXPECT_LT(cmp.relative_error, 1e-4);
  EXPECT_GT(cmp.analytic_norm, 0.0);
}

TEST(Tensor, ShapeMismatchThrows) {
  const Value a = Value::constant(Matrix::Zero(2, 3));
  const Value b = Value::constant(Matrix::Zero(3, 2));
  EXPECT_THROW(a + b, std::invalid_argument);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  ParamStore p;
  p.add("theta", Matrix::Constant(1, 1, 1.0));
  AdamState adam = AdamState::for_params(p, 0.1);
  const GradMap g = backward(sum(square(p.at("theta"))), p);
  adam_step(p, g, adam);
  EXPECT_NEAR(p.at("theta").data()(0, 0), 0.9, 1e-8);
  EXPECT_EQ(adam.step, 1u);
}

TEST(Adam, DescendsOnQuadratic) {
  ParamStore p;
  p.add("theta", Matrix::Constant(1, 1, 1.0));
  AdamState adam = AdamState::for_params(p, 0.1);
  for (int i = 0; i < 100; ++i) adam_step(p, backward(sum(square(p.at("theta"))), p), adam);
  EXPECT_LT(std::abs(p.at("theta").data()(0, 0)), 1.0);
}

TEST(Adam, RejectsNonFiniteGradient) {
  ParamStore p;
  p.add("theta", Matrix::Constant(1, 1, 1.0));
  AdamState adam = AdamState::for_params(p, 0.1);
  GradMap g{{"theta", Matrix::Constant(1, 1, std::nan(""))}};
  EXPECT_THROW(adam_step(p, g, adam), NumericalError);
}

TEST(Ema, MovesTowardParameters) {
  ParamStore p;
  p.add("w", Matrix::Zero(1, 1));
  EmaState ema = EmaState::from_params(p, 0.9);
  p.at("w").mutable_data()(0, 0) = 1.0;
  ema_update(ema, p);
  EXPECT_NEAR(ema.shadow.at("w")(0, 0), 0.1, 1e-15);
  EXPECT_NEAR(ema.as_params().at("w").data()(0, 0), 0.1, 1e-15);
}

TEST(Ida, BlendsFakeTowardGenerator) {
  ParamStore psi, theta;
  psi.add("w", Matrix::Constant(1, 1, 1.0));
  theta.add("w", Matrix::Zero(1, 1));
  ida_blend(psi, theta, 0.97);
  EXPECT_NEAR(psi.at("w").data()(0, 0), 0.97, 1e-15);
}

TEST(Params, CopyIsDeepAndBitEqual) {
  ParamStore a;
  a.add("w", Matrix::Constant(2, 2, 0.25));
  ParamStore b = a;
  EXPECT_TRUE(a.bit_equal(b));
  b.at("w").mutable_data()(0, 0) = 0.5;
  EXPECT_FALSE(a.bit_equal(b));
  EXPECT_DOUBLE_EQ(a.at("w").data()(0, 0), 0.25);
}

}  // namespace
}  // namespace fsf
