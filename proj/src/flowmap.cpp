#include "fsf/flowmap.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fsf {

namespace {

Value column(std::span<const double> values) {
  Matrix m(static_cast<Index>(values.size()), 1);
  for (std::size_t i = 0; i < values.size(); ++i) m(static_cast<Index>(i), 0) = values[i];
  return Value::constant(std::move(m));
}

std::vector<double> shifted(std::span<const double> v, double delta) {
  std::vector<double> out(v.begin(), v.end());
  for (auto& x : out) x += delta;
  return out;
}

double draw_time(const TimeSamplerConfig& cfg, Rng& rng) {
  // Draws below kMinTime are redrawn: they would only feed 1/t singularities.
  for (;;) {
    const double u = cfg.uniform ? rng.uniform() : rng.beta(cfg.beta_alpha, cfg.beta_beta);
    if (u >= kMinTime) return u;
  }
}

}  // namespace

Value flow_map_apply(const PseudoVelocityModel& model, const ParamStore& params, const Value& xt,
                     std::span<const double> t, std::span<const double> s, std::span<const int> labels) {
  const Value F = model.forward(params, xt, t, s, labels);
  std::vector<double> h(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) h[i] = s[i] - t[i];
  return xt + mul_rows(F, column(h));
}

Matrix jvp_central_difference(const TwoTimeField& field, const Matrix& x, std::span<const double> t,
                              std::span<const double> s, const JvpTangent& tangent, double eps) {
  if (!(eps > 0)) throw std::invalid_argument("jvp_central_difference: eps must be positive");
  if (tangent.dx.rows() != x.rows() || tangent.dx.cols() != x.cols()) {
    throw std::invalid_argument("jvp_central_difference: tangent shape mismatch");
  }
  const Matrix plus = field(x + eps * tangent.dx, shifted(t, eps * tangent.dt), shifted(s, eps * tangent.ds));
  const Matrix minus = field(x - eps * tangent.dx, shifted(t, -eps * tangent.dt), shifted(s, -eps * tangent.ds));
  Matrix out = (plus - minus) / (2 * eps);
  if (!out.allFinite()) throw NumericalError("jvp_central_difference: non-finite result");
  return out;
}

Matrix jvp_central_difference(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& x,
                              std::span<const double> t, std::span<const double> s, std::span<const int> labels,
                              const JvpTangent& tangent, double eps) {
  auto field = [&](const Matrix& xx, std::span<const double> tt, std::span<const double> ss) {
    return evaluate(model, params, xx, tt, ss, labels);
  };
  return jvp_central_difference(field, x, t, s, tangent, eps);
}

void TimeSamplerConfig::validate() const {
  if (!(beta_alpha > 0 && beta_beta > 0)) throw std::invalid_argument("time sampler: Beta shape parameters must be positive");
  if (!(mask_prob >= 0 && mask_prob <= 1)) throw std::invalid_argument("time sampler: mask_prob must lie in [0, 1]");
}

TimePair order_and_mask(double a, double b, bool mask) {
  TimePair p{std::max(a, b), std::min(a, b)};
  if (mask) p.s = p.t;
  return p;
}

TimePair sample_time_pair(const TimeSamplerConfig& cfg, Rng& rng, const TimePairOrdering& order) {
  const double a = draw_time(cfg, rng);
  const double b = draw_time(cfg, rng);
  const bool mask = rng.bernoulli(cfg.mask_prob);
  return order(a, b, mask);
}

TimeBatch sample_time_pairs(const TimeSamplerConfig& cfg, Index n, Rng& rng) {
  TimeBatch b;
  b.t.resize(static_cast<std::size_t>(n));
  b.s.resize(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < b.t.size(); ++i) {
    const auto p = sample_time_pair(cfg, rng);
    b.t[i] = p.t;
    b.s[i] = p.s;
  }
  return b;
}

VelocityField model_velocity(const PseudoVelocityModel& model, const ParamStore& params) {
  return [&model, &params](const Matrix& xt, std::span<const double> t, std::span<const int> labels) {
    return evaluate(model, params, xt, t, t, labels);
  };
}

VelocityField analytic_velocity(const GaussianMixtureSpec& spec) {
  std::vector<GaussianMixtureSpec> parts;
  for (int k = 0; k < spec.components(); ++k) parts.push_back(spec.component(k));
  return [spec, parts](const Matrix& xt, std::span<const double> t, std::span<const int> labels) {
    Matrix out(xt.rows(), xt.cols());
    for (Index i = 0; i < xt.rows(); ++i) {
      const auto k = static_cast<std::size_t>(i);
      const int c = labels[k];
      if (c != kNullLabel && (c < 0 || c >= spec.components())) throw std::out_of_range("analytic teacher: bad class label");
      const auto& law = c == kNullLabel ? spec : parts[static_cast<std::size_t>(c)];
      out.row(i) = gm_marginal_velocity(law, Vector(xt.row(i).transpose()), t[k]).transpose();
    }
    return out;
  };
}

void GuidanceConfig::validate() const {
  if (!(t_lo >= 0 && t_lo < t_hi && t_hi <= 1)) throw std::invalid_argument("guidance: need 0 <= t_lo < t_hi <= 1");
  if (!std::isfinite(scale)) throw std::invalid_argument("guidance: scale must be finite");
}

Matrix cfg_velocity(const VelocityField& teacher, const Matrix& xt, std::span<const double> t,
                    std::span<const int> labels, const GuidanceConfig& guidance) {
  const Index n = xt.rows();
  if (guidance.scale == 1.0) return teacher(xt, t, labels);

  // One stacked call: conditional rows first, then the same points unconditioned.
  Matrix x2(2 * n, xt.cols());
  x2.topRows(n) = xt;
  x2.bottomRows(n) = xt;
  std::vector<double> t2(t.begin(), t.end());
  t2.insert(t2.end(), t.begin(), t.end());
  std::vector<int> c2(labels.begin(), labels.end());
  c2.resize(static_cast<std::size_t>(2 * n), kNullLabel);
  const Matrix v = teacher(x2, t2, c2);

  Matrix out = v.topRows(n);
  for (Index i = 0; i < n; ++i) {
    const double ti = t[static_cast<std::size_t>(i)];
    if (ti >= guidance.t_lo && ti < guidance.t_hi) {
      out.row(i) = guidance.scale * v.row(i) + (1 - guidance.scale) * v.row(n + i);
    }
  }
  return out;
}

std::vector<double> consistency_weights(ConsistencyWeight kind, std::span<const double> t) {
  std::vector<double> w(t.size(), 1.0);
  if (kind == ConsistencyWeight::Cosine) {
    for (std::size_t i = 0; i < t.size(); ++i) w[i] = std::cos(t[i]);
  }
  return w;
}

Value cfm_loss(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& x,
               std::span<const int> labels, std::span<const double> t, const Matrix& z) {
  if (x.rows() == 0) throw std::invalid_argument("cfm_loss: empty batch");
  const Matrix xt = interpolate(x, z, t);
  const Value F = model.forward(params, Value::constant(xt), t, t, labels);
  return mean(row_sum(square(F - Value::constant(z - x))));
}

Value cfm_loss(const PseudoVelocityModel& model, const ParamStore& params, const LabeledBatch& batch, Rng& rng) {
  std::vector<double> t(static_cast<std::size_t>(batch.x.rows()));
  for (auto& ti : t) ti = rng.uniform();
  const Matrix z = rng.normal_matrix(batch.x.rows(), batch.x.cols());
  return cfm_loss(model, params, batch.x, batch.labels, t, z);
}

Matrix consistency_target(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& xt,
                          std::span<const double> t, std::span<const double> s, std::span<const int> labels,
                          const Matrix& v, double eps) {
  Matrix target = v;
  bool any_gap = false;
  for (std::size_t i = 0; i < t.size(); ++i) any_gap |= (s[i] != t[i]);
  if (!any_gap) return target;
  const Matrix jvp = jvp_central_difference(model, params, xt, t, s, labels, JvpTangent{v, 1.0, 0.0}, eps);
  for (Index i = 0; i < xt.rows(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    target.row(i) += (s[k] - t[k]) * jvp.row(i);
  }
  return target;
}

Value consistency_loss(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& xt,
                       std::span<const double> t, std::span<const double> s, std::span<const int> labels,
                       const Matrix& v, std::span<const double> weights, double eps) {
  if (xt.rows() == 0) throw std::invalid_argument("consistency_loss: empty batch");
  const Value target = detach(consistency_target(model, params, xt, t, s, labels, v, eps));
  const Value F = model.forward(params, Value::constant(xt), t, s, labels);
  return mean(mul_rows(row_sum(square(F - target)), column(weights)));
}

Value flow_map_derivative_loss(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& xt,
                               std::span<const double> t, std::span<const double> s, std::span<const int> labels,
                               const Matrix& v, std::span<const double> weights, double eps) {
  const Matrix target = consistency_target(model, params, xt, t, s, labels, v, eps);
  const Value F = model.forward(params, Value::constant(xt), t, s, labels);
  std::vector<double> h(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) h[i] = s[i] - t[i];
  const Value f = Value::constant(xt) + mul_rows(F, column(h));
  // Total derivative of f along the trajectory: v - F + (s - t) dF/dt.
  const Value dfdt = detach(target - F.data());
  return mean(mul_rows(row_sum(f * dfdt), column(weights)));
}

Value ct_loss(const PseudoVelocityModel& model, const ParamStore& params, const LabeledBatch& batch,
              const ConsistencyConfig& cfg, Rng& rng) {
  const auto times = sample_time_pairs(cfg.sampler, batch.x.rows(), rng);
  const Matrix z = rng.normal_matrix(batch.x.rows(), batch.x.cols());
  const Matrix xt = interpolate(batch.x, z, times.t);
  const Matrix v = z - batch.x;
  const auto w = consistency_weights(cfg.weight, times.t);
  return consistency_loss(model, params, xt, times.t, times.s, batch.labels, v, w, cfg.jvp_eps);
}

Value cd_loss(const PseudoVelocityModel& model, const ParamStore& params, const VelocityField& teacher,
              const LabeledBatch& batch, const ConsistencyConfig& cfg, const GuidanceConfig& guidance, Rng& rng) {
  const auto times = sample_time_pairs(cfg.sampler, batch.x.rows(), rng);
  const Matrix z = rng.normal_matrix(batch.x.rows(), batch.x.cols());
  const Matrix xt = interpolate(batch.x, z, times.t);
  const Matrix v = cfg_velocity(teacher, xt, times.t, batch.labels, guidance);
  const auto w = consistency_weights(cfg.weight, times.t);
  return consistency_loss(model, params, xt, times.t, times.s, batch.labels, v, w, cfg.jvp_eps);
}

Rollout rollout(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& z,
                std::span<const int> labels, int steps) {
  if (steps < 1) throw std::invalid_argument("rollout: steps must be >= 1");
  NoGradGuard guard;
  Rollout r;
  const auto n = static_cast<std::size_t>(z.rows());
  Matrix x = z;
  r.times.push_back(1.0);
  r.states.push_back(x);
  for (int i = steps; i >= 1; --i) {
    const std::vector<double> t(n, static_cast<double>(i) / steps);
    const std::vector<double> s(n, static_cast<double>(i - 1) / steps);
    x = flow_map_apply(model, params, Value::constant(x), t, s, labels).data();
    r.times.push_back(s.empty() ? static_cast<double>(i - 1) / steps : s[0]);
    r.states.push_back(x);
  }
  r.sample = std::move(x);
  return r;
}

Matrix euler_sample(const VelocityField& field, const Matrix& z, std::span<const int> labels, int steps) {
  if (steps < 1) throw std::invalid_argument("euler_sample: steps must be >= 1");
  const auto n = static_cast<std::size_t>(z.rows());
  Matrix x = z;
  for (int k = 0; k < steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) / steps;
    const double t_next = 1.0 - static_cast<double>(k + 1) / steps;
    const std::vector<double> tt(n, t);
    x += (t_next - t) * field(x, tt, labels);
    if (!x.allFinite()) throw NumericalError("euler_sample: non-finite state");
  }
  return x;
}

}  // namespace fsf
