#include "fsf/interpolant.hpp"

#include <cmath>
#include <stdexcept>

namespace fsf {

Vector interpolate(const Vector& x, const Vector& z, double t) {
  if (!(t >= 0 && t <= 1)) throw std::invalid_argument("interpolate: time must lie in [0, 1]");
  if (x.size() != z.size()) throw std::invalid_argument("interpolate: dimension mismatch");
  return (1 - t) * x + t * z;
}

Matrix interpolate(const Matrix& x, const Matrix& z, std::span<const double> t) {
  if (x.rows() != z.rows() || x.cols() != z.cols()) throw std::invalid_argument("interpolate: shape mismatch");
  if (static_cast<Index>(t.size()) != x.rows()) throw std::invalid_argument("interpolate: time count mismatch");
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double ti = t[static_cast<std::size_t>(i)];
    if (!(ti >= 0 && ti <= 1)) throw std::invalid_argument("interpolate: time must lie in [0, 1]");
    out.row(i) = (1 - ti) * x.row(i) + ti * z.row(i);
  }
  return out;
}

Vector conditional_velocity(const Vector& x, const Vector& xt, double t) {
  if (!(t >= kMinTime)) throw std::invalid_argument("conditional_velocity: time must be positive");
  return (xt - x) / t;
}

Vector score_from_velocity(const Vector& v, const Vector& xt, double t) {
  if (!(t >= kMinTime)) throw std::invalid_argument("score_from_velocity: time must be positive");
  return -(xt + (1 - t) * v) / t;
}

Vector velocity_from_score(const Vector& s, const Vector& xt, double t) {
  if (!(t >= kMinTime && t < 1)) throw std::invalid_argument("velocity_from_score: time must lie in (0, 1)");
  return -(t * s + xt) / (1 - t);
}

double gamma_weight(double t) {
  if (!(t >= kMinTime)) throw std::invalid_argument("gamma_weight: time must be positive");
  return (1 - t) / t;
}

Vector euler_pf_ode(const PointField& field, Vector x, double t_start, double t_end, int steps) {
  if (steps < 1) throw std::invalid_argument("euler_pf_ode: steps must be >= 1");
  const double h = (t_end - t_start) / steps;
  for (int i = 0; i < steps; ++i) {
    const double t = t_start + i * h;
    x += h * field(x, t);
    if (!x.allFinite()) throw NumericalError("euler_pf_ode: non-finite state");
  }
  return x;
}

LinearGaussianFlow LinearGaussianFlow::from_spec(const GaussianMixtureSpec& single) {
  if (single.components() != 1) throw std::invalid_argument("LinearGaussianFlow: needs a single-component spec");
  return LinearGaussianFlow{single.means[0], single.stdevs[0]};
}

double LinearGaussianFlow::log_stdev_rate(double t) const {
  const double rho2 = (1 - t) * (1 - t) * stdev * stdev + t * t;
  return (t - (1 - t) * stdev * stdev) / rho2;
}

Vector analytic_flow_map(const LinearGaussianFlow& flow, const Vector& xt, double t, double s) {
  return flow.path_mean(s) + (flow.path_stdev(s) / flow.path_stdev(t)) * (xt - flow.path_mean(t));
}

Vector analytic_pseudo_velocity(const LinearGaussianFlow& flow, const Vector& xt, double t, double s) {
  if (t == s) return -flow.mean + flow.log_stdev_rate(t) * (xt - flow.path_mean(t));
  return (xt - analytic_flow_map(flow, xt, t, s)) / (t - s);
}

}  // namespace fsf
