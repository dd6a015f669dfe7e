#include "fsf/gaussian_mixture.hpp"
#include "fsf/interpolant.hpp"
#include "fsf/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

namespace fsf {
namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

TEST(Interpolant, ConditionalVelocityRecoversNoise) {
  Rng rng(3);
  for (int k = 0; k < 50; ++k) {
    const Vector x = rng.normal_matrix(1, 3).transpose();
    const Vector z = rng.normal_matrix(1, 3).transpose();
    const double t = rng.uniform(0.01, 1.0);
    const Vector xt = interpolate(x, z, t);
    EXPECT_LT((conditional_velocity(x, xt, t) - (z - x)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Interpolant, SingleGaussianVelocityClosedForm) {
  // x ~ N(2, 1), z ~ N(0, 1): jointly Gaussian with x_t, so both posterior
  // means are linear regressions on x_t.
  const auto spec = g1(vec({2.0}), 1.0);
  for (double t : {0.1, 0.37, 0.5, 0.9, 1.0}) {
    for (double xt : {-1.5, 0.0, 0.8, 2.5}) {
      const double var = (1 - t) * (1 - t) + t * t;
      const double ex = 2.0 + (1 - t) / var * (xt - (1 - t) * 2.0);
      const double ez = t / var * (xt - (1 - t) * 2.0);
      EXPECT_NEAR(gm_marginal_velocity(spec, vec({xt}), t)(0), ez - ex, 1e-12) << "t=" << t << " x=" << xt;
    }
  }
}

TEST(Interpolant, VelocityMatchesImportanceWeightedMonteCarlo) {
  const auto spec = gm2_sym(vec({1.0, 0.5}), 0.3);
  const Vector xt = vec({0.3, 0.1});
  const double t = 0.6;
  Rng rng(2024);
  const int n = 1000000;
  // Proposal: data draws; weight by the density of x_t given x.
  const auto draws = sample_mixture(spec, n, rng);
  double wsum = 0, w2sum = 0;
  Vector m1 = Vector::Zero(2), m2 = Vector::Zero(2);
  for (int i = 0; i < n; ++i) {
    const Vector x = draws.x.row(i).transpose();
    const Vector z = (xt - (1 - t) * x) / t;
    const double w = std::exp(-0.5 * z.squaredNorm());
    const Vector u = z - x;
    wsum += w;
    w2sum += w * w;
    m1 += w * u;
    m2 += w * u.cwiseProduct(u);
  }
  const Vector mean = m1 / wsum;
  const Vector var = m2 / wsum - mean.cwiseProduct(mean);
  const double ess = wsum * wsum / w2sum;
  const Vector exact = gm_marginal_velocity(spec, xt, t);
  for (int j = 0; j < 2; ++j) {
    const double se = std::sqrt(var(j) / ess);
    EXPECT_LT(std::abs(exact(j) - mean(j)), 3 * se) << "coordinate " << j;
  }
}

TEST(Interpolant, StandardNormalScore) {
  const auto spec = g1(vec({0.0}), 1.0);
  EXPECT_NEAR(gm_marginal_score(spec, vec({1.0}), 0.5)(0), -2.0, 1e-12);
  EXPECT_NEAR(gm_marginal_velocity(spec, vec({1.0}), 0.5)(0), 0.0, 1e-12);
  EXPECT_NEAR(score_from_velocity(vec({0.0}), vec({1.0}), 0.5)(0), -2.0, 1e-15);
}

TEST(Interpolant, ScoreIsGradientOfLogDensity) {
  const auto spec = gm8_ring(1.0, 0.2);
  Rng rng(5);
  const double h = 1e-5;
  for (int k = 0; k < 20; ++k) {
    const Vector x = rng.normal_matrix(1, 2).transpose();
    const double t = rng.uniform(0.05, 0.95);
    Vector fd(2);
    for (int j = 0; j < 2; ++j) {
      Vector xp = x, xm = x;
      xp(j) += h;
      xm(j) -= h;
      fd(j) = (gm_log_density(spec, xp, t) - gm_log_density(spec, xm, t)) / (2 * h);
    }
    EXPECT_LT((gm_marginal_score(spec, x, t) - fd).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Interpolant, ScoreAndVelocityPathsAgree) {
  const auto spec = gm8_ring();
  for (double t = 0.05; t < 1.0; t += 0.1) {
    for (double a = -1.5; a <= 1.5; a += 0.5) {
      for (double b = -1.5; b <= 1.5; b += 0.5) {
        const Vector x = vec({a, b});
        const Vector v = gm_marginal_velocity(spec, x, t);
        EXPECT_LT((score_from_velocity(v, x, t) - gm_marginal_score(spec, x, t)).cwiseAbs().maxCoeff(), 1e-9);
        EXPECT_LT((velocity_from_score(gm_marginal_score(spec, x, t), x, t) - v).cwiseAbs().maxCoeff(), 1e-9);
      }
    }
  }
}

TEST(Interpolant, PriorEndpointIsStandardNormal) {
  const auto spec = gm8_ring();
  const Vector x = vec({0.4, -0.7});
  EXPECT_NEAR(gm_log_density(spec, x, 1.0), -std::log(2 * std::numbers::pi) - 0.5 * x.squaredNorm(), 1e-12);
}

TEST(Interpolant, RejectsTimesOutsideRange) {
  const auto spec = gm8_ring();
  EXPECT_THROW(gm_marginal_velocity(spec, vec({0.0, 0.0}), 0.0), std::invalid_argument);
  EXPECT_THROW(gm_marginal_velocity(spec, vec({0.0, 0.0}), 1.5), std::invalid_argument);
  EXPECT_THROW(gm_marginal_velocity(spec, vec({0.0}), 0.5), std::invalid_argument);
}

TEST(GaussianFlow, NoiseToDataIsShift) {
  const auto flow = LinearGaussianFlow::from_spec(g1(vec({2.0}), 1.0));
  for (double x : {-2.0, 0.0, 1.3}) {
    EXPECT_NEAR(analytic_flow_map(flow, vec({x}), 1.0, 0.0)(0), x + 2.0, 1e-12);
  }
}

TEST(GaussianFlow, SemigroupAndRoundTrip) {
  const auto flow = LinearGaussianFlow::from_spec(g1(vec({0.5, -1.0}), 0.3));
  Rng rng(9);
  for (int k = 0; k < 50; ++k) {
    const Vector x = rng.normal_matrix(1, 2).transpose();
    const double t = rng.uniform(0.0, 1.0);
    const double r = rng.uniform(0.0, t);
    const double s = rng.uniform(0.0, r);
    const Vector direct = analytic_flow_map(flow, x, t, s);
    const Vector composed = analytic_flow_map(flow, analytic_flow_map(flow, x, t, r), r, s);
    EXPECT_LT((direct - composed).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((analytic_flow_map(flow, direct, s, t) - x).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(GaussianFlow, PseudoVelocityLimitsToMarginalVelocity) {
  const auto spec = g1(vec({2.0}), 1.0);
  const auto flow = LinearGaussianFlow::from_spec(spec);
  const Vector x = vec({0.7});
  EXPECT_NEAR(analytic_pseudo_velocity(flow, x, 0.6, 0.6)(0), gm_marginal_velocity(spec, x, 0.6)(0), 1e-12);
  EXPECT_NEAR(analytic_pseudo_velocity(flow, x, 0.6, 0.6 - 1e-7)(0), gm_marginal_velocity(spec, x, 0.6)(0), 1e-6);
}

TEST(GaussianFlow, EulerConvergesToClosedForm) {
  const auto spec = g1(vec({2.0}), 1.0);
  const auto flow = LinearGaussianFlow::from_spec(spec);
  const PointField field = [&](const Vector& x, double t) {
    return gm_marginal_velocity(spec, x, std::max(t, kMinTime));
  };
  for (double z : {-1.0, 0.0, 0.5, 2.0}) {
    const Vector out = euler_pf_ode(field, vec({z}), 1.0, 0.0, 4096);
    EXPECT_NEAR(out(0), analytic_flow_map(flow, vec({z}), 1.0, 0.0)(0), 1e-3);
  }
}

TEST(Mixture, LabelledSamplingRespectsLabels) {
  const auto spec = gm8_ring(1.0, 0.01);
  Rng rng(1);
  const std::vector<int> labels{0, 3, 7, 3};
  const auto b = sample_mixture_given_labels(spec, labels, rng);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    EXPECT_LT((b.x.row(static_cast<Index>(i)).transpose() - spec.means[labels[i]]).norm(), 0.1);
  }
  const std::vector<int> bad{8};
  EXPECT_THROW(sample_mixture_given_labels(spec, bad, rng), std::invalid_argument);
}

TEST(Mixture, PresetsValidate) {
  EXPECT_EQ(make_preset("gm8-ring").components(), 8);
  EXPECT_EQ(make_preset("gm2-sym").dim(), 2);
  EXPECT_EQ(make_preset("g1").dim(), 1);
  EXPECT_THROW(make_preset("nope"), std::invalid_argument);
  GaussianMixtureSpec bad = gm8_ring();
  bad.weights[0] = 0.5;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  const auto round = gm_from_json(to_json(gm8_ring(2.0, 0.1)));
  EXPECT_DOUBLE_EQ(round.means[2](1), 2.0);
}

}  // namespace
}  // namespace fsf
