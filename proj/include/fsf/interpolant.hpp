#pragma once

// Linear interpolant between data (t = 0) and standard-normal noise (t = 1),
// the score/velocity change of variables, and reference ODE solutions.

#include "fsf/gaussian_mixture.hpp"

#include <functional>

namespace fsf {

/// x_t = (1 - t) x + t z
Vector interpolate(const Vector& x, const Vector& z, double t);
Matrix interpolate(const Matrix& x, const Matrix& z, std::span<const double> t);

/// v_t(x_t | x) = (x_t - x) / t
Vector conditional_velocity(const Vector& x, const Vector& xt, double t);

/// s = -(x_t + (1 - t) v) / t
Vector score_from_velocity(const Vector& v, const Vector& xt, double t);
/// v = -(t s + x_t) / (1 - t); needs t < 1.
Vector velocity_from_score(const Vector& s, const Vector& xt, double t);

/// gamma_t = (1 - t) / t
double gamma_weight(double t);

using PointField = std::function<Vector(const Vector& x, double t)>;

/// Fixed-step explicit Euler for dx = v(x, t) dt from t_start to t_end.
Vector euler_pf_ode(const PointField& field, Vector x, double t_start, double t_end, int steps);

/// Exact probability-flow transport for Gaussian data N(mean, stdev^2 I):
/// the path has mean m(t) = (1 - t) mean and stdev rho(t) = sqrt((1-t)^2 stdev^2 + t^2).
struct LinearGaussianFlow {
  Vector mean;
  double stdev = 1.0;

  static LinearGaussianFlow from_spec(const GaussianMixtureSpec& single);

  Vector path_mean(double t) const { return (1 - t) * mean; }
  double path_stdev(double t) const { return std::sqrt((1 - t) * (1 - t) * stdev * stdev + t * t); }
  /// d rho / dt divided by rho.
  double log_stdev_rate(double t) const;
};

/// f(x; t, s) = m(s) + rho(s) / rho(t) (x - m(t))
Vector analytic_flow_map(const LinearGaussianFlow& flow, const Vector& xt, double t, double s);

/// Average velocity (x_t - f(x_t; t, s)) / (t - s); the instantaneous
/// velocity when s == t.
Vector analytic_pseudo_velocity(const LinearGaussianFlow& flow, const Vector& xt, double t, double s);

}  // namespace fsf
