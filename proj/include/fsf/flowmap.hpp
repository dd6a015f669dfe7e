#pragma once

#include "fsf/gaussian_mixture.hpp"
#include "fsf/interpolant.hpp"
#include "fsf/model.hpp"

#include <functional>
#include <span>
#include <vector>

namespace fsf {

/// x_s = x_t + (s - t) F(x_t; t, s, c), row-wise.
Value flow_map_apply(const PseudoVelocityModel& model, const ParamStore& params, const Value& xt,
                     std::span<const double> t, std::span<const double> s, std::span<const int> labels);

/// Any two-time field evaluated on plain data (used for the JVP).
using TwoTimeField = std::function<Matrix(const Matrix& x, std::span<const double> t, std::span<const double> s)>;

struct JvpTangent {
  Matrix dx;  // per-row direction in x
  double dt = 1.0;
  double ds = 0.0;
};

/// (F(x + eps dx, t + eps dt, s + eps ds) - F(x - eps dx, t - eps dt, s - eps ds)) / (2 eps)
Matrix jvp_central_difference(const TwoTimeField& field, const Matrix& x, std::span<const double> t,
                              std::span<const double> s, const JvpTangent& tangent, double eps);
Matrix jvp_central_difference(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& x,
                              std::span<const double> t, std::span<const double> s, std::span<const int> labels,
                              const JvpTangent& tangent, double eps);

// ---- time sampling -------------------------------------------------------

struct TimeSamplerConfig {
  double beta_alpha = 0.8;
  double beta_beta = 1.0;
  double mask_prob = 0.5;
  bool uniform = false;  // U(0,1) draws instead of Beta

  void validate() const;
};

struct TimePair {
  double t = 0;
  double s = 0;
};

/// Orders two raw draws so that t >= s, then collapses s onto t when `mask` is set.
TimePair order_and_mask(double a, double b, bool mask);

using TimePairOrdering = std::function<TimePair(double a, double b, bool mask)>;

/// Two independent draws (each at least kMinTime), ordered and masked.
TimePair sample_time_pair(const TimeSamplerConfig& cfg, Rng& rng, const TimePairOrdering& order = order_and_mask);

struct TimeBatch {
  std::vector<double> t;
  std::vector<double> s;
};
TimeBatch sample_time_pairs(const TimeSamplerConfig& cfg, Index n, Rng& rng);

// ---- teachers ------------------------------------------------------------

/// Instantaneous velocity v(x_t; t, c) on a batch. Label kNullLabel selects
/// the unconditional field.
using VelocityField = std::function<Matrix(const Matrix& xt, std::span<const double> t, std::span<const int> labels)>;

/// A network evaluated at s = t, without graph recording. The model and
/// parameters are captured by reference.
VelocityField model_velocity(const PseudoVelocityModel& model, const ParamStore& params);
/// Exact marginal velocity: class k uses component k alone, the null class
/// uses the full mixture.
VelocityField analytic_velocity(const GaussianMixtureSpec& spec);

struct GuidanceConfig {
  double scale = 6.0;  // omega
  double t_lo = 0.0;
  double t_hi = 0.9;  // blend applies for t_lo <= t < t_hi

  void validate() const;
};

/// omega v(x_t, t, c) + (1 - omega) v(x_t, t, null) inside the guidance
/// range, v(x_t, t, c) outside it.
Matrix cfg_velocity(const VelocityField& teacher, const Matrix& xt, std::span<const double> t,
                    std::span<const int> labels, const GuidanceConfig& guidance);

// ---- objectives ----------------------------------------------------------

enum class ConsistencyWeight { Cosine, Constant };

struct ConsistencyConfig {
  TimeSamplerConfig sampler;
  double jvp_eps = 0.005;
  ConsistencyWeight weight = ConsistencyWeight::Cosine;
};

std::vector<double> consistency_weights(ConsistencyWeight kind, std::span<const double> t);

/// mean_i ||F(x_t, t, t, c) - (z - x)||^2 with explicit draws.
Value cfm_loss(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& x,
               std::span<const int> labels, std::span<const double> t, const Matrix& z);
/// Same, with t ~ U[0,1] and z ~ N(0, I) drawn from rng.
Value cfm_loss(const PseudoVelocityModel& model, const ParamStore& params, const LabeledBatch& batch, Rng& rng);

/// v + (s - t) dF/dt along the direction (v, 1, 0), evaluated without graph.
Matrix consistency_target(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& xt,
                          std::span<const double> t, std::span<const double> s, std::span<const int> labels,
                          const Matrix& v, double eps);

/// mean_i w_i ||F(x_t, t, s, c) - sg[v + (s - t) JVP]||^2 for a given velocity v.
Value consistency_loss(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& xt,
                       std::span<const double> t, std::span<const double> s, std::span<const int> labels,
                       const Matrix& v, std::span<const double> weights, double eps);

/// The flow-map form w~ <f_theta, sg[d f_theta / dt]>, whose gradient equals
/// that of consistency_loss with weights w~ (t - s) / 2.
Value flow_map_derivative_loss(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& xt,
                               std::span<const double> t, std::span<const double> s, std::span<const int> labels,
                               const Matrix& v, std::span<const double> weights, double eps);

/// Consistency training on data: v is the conditional velocity z - x.
Value ct_loss(const PseudoVelocityModel& model, const ParamStore& params, const LabeledBatch& batch,
              const ConsistencyConfig& cfg, Rng& rng);

/// Consistency distillation: v is the guided teacher velocity at x_t.
Value cd_loss(const PseudoVelocityModel& model, const ParamStore& params, const VelocityField& teacher,
              const LabeledBatch& batch, const ConsistencyConfig& cfg, const GuidanceConfig& guidance, Rng& rng);

// ---- sampling ------------------------------------------------------------

struct Rollout {
  Matrix sample;
  std::vector<double> times;    // 1, (N-1)/N, ..., 0
  std::vector<Matrix> states;   // state at each entry of `times`
};

/// N-step flow-map generation from z at t = 1 down to t = 0.
Rollout rollout(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& z,
                std::span<const int> labels, int steps);

/// Euler integration of the instantaneous velocity F(x; t, t) from 1 to 0.
Matrix euler_sample(const VelocityField& field, const Matrix& z, std::span<const int> labels, int steps);

}  // namespace fsf
