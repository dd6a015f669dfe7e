#include "fsf/distill.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fsf {

namespace {

Value column(std::span<const double> values) {
  Matrix m(static_cast<Index>(values.size()), 1);
  for (std::size_t i = 0; i < values.size(); ++i) m(static_cast<Index>(i), 0) = values[i];
  return Value::constant(std::move(m));
}

// Weights computed from generator outputs are gradient-opaque.
Value opaque_column(std::span<const double> values) {
  Matrix m(static_cast<Index>(values.size()), 1);
  for (std::size_t i = 0; i < values.size(); ++i) m(static_cast<Index>(i), 0) = values[i];
  return detach(std::move(m));
}

double open_unit(Rng& rng) {
  for (;;) {
    const double u = rng.uniform();
    if (u > kMinTime && u < 1 - kMinTime) return u;
  }
}

void check_rows(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

double timestep_shift(double u, double gamma) {
  if (!(gamma >= 1)) throw std::invalid_argument("timestep_shift: gamma must be >= 1");
  return gamma * u / ((gamma - 1) * u + 1);
}

void FsfConfig::validate() const {
  if (!(lambda >= 0)) throw std::invalid_argument("fsf: lambda must be >= 0");
  if (!(gamma_shift >= 1)) throw std::invalid_argument("fsf: gamma_shift must be >= 1");
  if (sim_steps < 1) throw std::invalid_argument("fsf: sim_steps must be >= 1");
  if (!(constant_weight >= 0)) throw std::invalid_argument("fsf: constant_weight must be >= 0");
  guidance.validate();
}

void DmdBaselineConfig::validate() const {
  if (ttur_ratio < 1) throw std::invalid_argument("dmd2: ttur_ratio must be >= 1");
  if (!(ida_lambda >= 0 && ida_lambda <= 1)) throw std::invalid_argument("dmd2: ida_lambda must lie in [0, 1]");
  if (sim_steps < 1) throw std::invalid_argument("dmd2: sim_steps must be >= 1");
}

RolloutTrace backward_simulate(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& z,
                               std::span<const int> labels, int steps) {
  if (steps < 1) throw std::invalid_argument("backward_simulate: steps must be >= 1");
  const auto n = static_cast<std::size_t>(z.rows());
  RolloutTrace tr;
  tr.base = z;
  tr.times.push_back(1.0);
  tr.states.push_back(z);
  Matrix x = z;
  Value acc;
  for (int i = steps; i >= 1; --i) {
    const double ti = static_cast<double>(i) / steps;
    const double si = static_cast<double>(i - 1) / steps;
    const std::vector<double> t(n, ti), s(n, si);
    const Value F = model.forward(params, detach(x), t, s, labels);
    acc = acc.defined() ? acc + F : F;
    x += (si - ti) * F.data();
    if (!x.allFinite()) throw NumericalError("backward_simulate: non-finite intermediate");
    tr.times.push_back(si);
    tr.states.push_back(x);
  }
  tr.tilde_F = scale(acc, 1.0 / steps);
  tr.endpoint = z - tr.tilde_F.data();
  tr.pseudo_velocity = tr.tilde_F.data();
  return tr;
}

RolloutTrace dmd2_backward_simulate(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& z,
                                    std::span<const int> labels, int steps, Rng& rng) {
  if (steps < 1) throw std::invalid_argument("dmd2_backward_simulate: steps must be >= 1");
  const auto n = static_cast<std::size_t>(z.rows());
  RolloutTrace tr;
  Matrix x;
  {
    NoGradGuard guard;
    Matrix x_in = z;
    for (int i = 0; i < steps; ++i) {
      const double tau = static_cast<double>(steps - i) / steps;
      if (i > 0) x_in = (1 - tau) * x + tau * rng.normal_matrix(z.rows(), z.cols());
      const std::vector<double> t(n, tau), s(n, 0.0);
      x = flow_map_apply(model, params, Value::constant(x_in), t, s, labels).data();
      if (!x.allFinite()) throw NumericalError("dmd2_backward_simulate: non-finite intermediate");
      tr.times.push_back(tau);
      tr.states.push_back(x_in);
    }
  }
  std::vector<double> tau(n);
  for (auto& v : tau) v = static_cast<double>(steps - rng.uniform_int(0, steps - 1)) / steps;
  const Matrix noise = rng.normal_matrix(z.rows(), z.cols());
  Matrix x_in(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    const double ti = tau[static_cast<std::size_t>(i)];
    x_in.row(i) = (1 - ti) * x.row(i) + ti * noise.row(i);
  }
  const std::vector<double> zero(n, 0.0);
  const Value F = model.forward(params, detach(x_in), tau, zero, labels);
  tr.tilde_F = mul_rows(F, column(tau));
  tr.base = x_in;
  tr.endpoint = x_in - tr.tilde_F.data();
  tr.pseudo_velocity = F.data();
  tr.times.push_back(0.0);
  tr.states.push_back(tr.endpoint);
  return tr;
}

Perturbation perturb(const Matrix& x, double gamma, Rng& rng) {
  Perturbation p;
  p.t.resize(static_cast<std::size_t>(x.rows()));
  for (auto& t : p.t) t = timestep_shift(open_unit(rng), gamma);
  p.noise = rng.normal_matrix(x.rows(), x.cols());
  p.xt = interpolate(x, p.noise, p.t);
  return p;
}

DeltaResult fsf_delta(const PseudoVelocityModel& model, const ParamStore& fake_params, const VelocityField& teacher,
                      const Matrix& xt, std::span<const double> t, std::span<const int> labels,
                      const GuidanceConfig& guidance, bool null_label_fake_side) {
  const std::vector<double> zero(t.size(), 0.0);
  std::vector<int> fake_labels(labels.begin(), labels.end());
  if (null_label_fake_side) std::fill(fake_labels.begin(), fake_labels.end(), kNullLabel);
  DeltaResult r;
  r.v_teacher = cfg_velocity(teacher, xt, t, labels, guidance);
  r.delta = evaluate(model, fake_params, xt, t, zero, fake_labels) - r.v_teacher;
  return r;
}

Matrix scratch_delta(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& xt,
                     std::span<const double> t, std::span<const int> labels) {
  const std::vector<double> zero(t.size(), 0.0);
  return evaluate(model, params, xt, t, zero, labels) - evaluate(model, params, xt, t, t, labels);
}

Value fsf_dmd_loss(const Value& tilde_F, const Matrix& delta, std::span<const double> weights) {
  check_rows(tilde_F.data(), delta, "fsf_dmd_loss");
  const Value target = stop_gradient(tilde_F - detach(delta));
  return mean(mul_rows(row_sum(square(tilde_F - target)), opaque_column(weights)));
}

std::vector<double> adaptive_weight(const Matrix& tilde_F, const Matrix& v_teacher, double floor) {
  check_rows(tilde_F, v_teacher, "adaptive_weight");
  std::vector<double> w(static_cast<std::size_t>(tilde_F.rows()));
  for (Index i = 0; i < tilde_F.rows(); ++i) {
    const double mad = (tilde_F.row(i) - v_teacher.row(i)).cwiseAbs().mean();
    w[static_cast<std::size_t>(i)] = 1.0 / std::max(mad, floor);
  }
  return w;
}

std::vector<double> dmd_weights(const FsfConfig& cfg, std::span<const double> t, const Matrix& pseudo_velocity,
                                const Matrix& v_teacher) {
  std::vector<double> w(t.size(), cfg.constant_weight);
  if (cfg.weight_mode == WeightMode::Adaptive || cfg.weight_mode == WeightMode::AdaptiveCosine) {
    const auto a = adaptive_weight(pseudo_velocity, v_teacher);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] *= a[i];
  }
  if (cfg.weight_mode == WeightMode::Cosine || cfg.weight_mode == WeightMode::AdaptiveCosine) {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] *= std::cos(t[i]);
  }
  return w;
}

namespace {

RolloutTrace simulate(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& z,
                      std::span<const int> labels, const FsfConfig& cfg, Rng& rng) {
  switch (cfg.sim_mode) {
    case SimulationMode::FlowMap: return backward_simulate(model, params, z, labels, cfg.sim_steps);
    case SimulationMode::Dmd2: return dmd2_backward_simulate(model, params, z, labels, cfg.sim_steps, rng);
    case SimulationMode::None: break;
  }
  return backward_simulate(model, params, z, labels, 1);
}

void fill_diag(DmdDiagnostics* diag, const Matrix& delta, std::span<const double> w) {
  if (!diag) return;
  diag->delta_rms = std::sqrt(delta.squaredNorm() / static_cast<double>(std::max<Index>(delta.rows(), 1)));
  double acc = 0;
  for (double x : w) acc += x;
  diag->mean_weight = w.empty() ? 0 : acc / static_cast<double>(w.size());
}

}  // namespace

Value fsf_dmd_objective(const PseudoVelocityModel& model, const ParamStore& params, const ParamStore& fake_params,
                        const VelocityField& teacher, std::span<const int> labels, const FsfConfig& cfg, Rng& rng,
                        DmdDiagnostics* diag) {
  const Matrix z = rng.normal_matrix(static_cast<Index>(labels.size()), model.dim());
  const RolloutTrace trace = simulate(model, params, z, labels, cfg, rng);
  const Perturbation p = perturb(trace.endpoint, cfg.gamma_shift, rng);
  const DeltaResult d = fsf_delta(model, fake_params, teacher, p.xt, p.t, labels, cfg.guidance, cfg.fake_side_null_label);
  const auto w = dmd_weights(cfg, p.t, trace.pseudo_velocity, d.v_teacher);
  fill_diag(diag, d.delta, w);
  return fsf_dmd_loss(trace, d.delta, w);
}

Value fsf_scratch_objective(const PseudoVelocityModel& model, const ParamStore& params, const ParamStore& self_params,
                            std::span<const int> labels, const FsfConfig& cfg, Rng& rng, DmdDiagnostics* diag) {
  const Matrix z = rng.normal_matrix(static_cast<Index>(labels.size()), model.dim());
  const RolloutTrace trace = simulate(model, params, z, labels, cfg, rng);
  const Perturbation p = perturb(trace.endpoint, cfg.gamma_shift, rng);
  const std::vector<double> zero(p.t.size(), 0.0);
  const Matrix endpoint_v = evaluate(model, self_params, p.xt, p.t, zero, labels);
  const Matrix instant_v = evaluate(model, self_params, p.xt, p.t, p.t, labels);
  const Matrix delta = endpoint_v - instant_v;
  const auto w = dmd_weights(cfg, p.t, trace.pseudo_velocity, instant_v);
  fill_diag(diag, delta, w);
  return fsf_dmd_loss(trace, delta, w);
}

Value dmd2_fake_loss(const PseudoVelocityModel& fake, const ParamStore& fake_params, const Matrix& xhat,
                     std::span<const int> labels, std::span<const double> t, const Matrix& noise) {
  if (xhat.rows() == 0) throw std::invalid_argument("dmd2_fake_loss: empty batch");
  const Matrix xt = interpolate(xhat, noise, t);
  const Value F = fake.forward(fake_params, Value::constant(xt), t, t, labels);
  return mean(row_sum(square(F - Value::constant(noise - xhat))));
}

Value dmd2_fake_loss(const PseudoVelocityModel& fake, const ParamStore& fake_params, const Matrix& xhat,
                     std::span<const int> labels, Rng& rng) {
  std::vector<double> t(static_cast<std::size_t>(xhat.rows()));
  for (auto& ti : t) ti = open_unit(rng);
  const Matrix noise = rng.normal_matrix(xhat.rows(), xhat.cols());
  return dmd2_fake_loss(fake, fake_params, xhat, labels, t, noise);
}

Value dmd2_generator_loss(const RolloutTrace& trace, const Matrix& v_fake, const Matrix& v_teacher, double floor) {
  check_rows(v_fake, v_teacher, "dmd2_generator_loss");
  check_rows(trace.pseudo_velocity, v_teacher, "dmd2_generator_loss");
  const auto inv = adaptive_weight(trace.pseudo_velocity, v_teacher, floor);
  Matrix g = v_fake - v_teacher;
  for (Index i = 0; i < g.rows(); ++i) g.row(i) *= inv[static_cast<std::size_t>(i)];
  const Value target = stop_gradient(trace.tilde_F - detach(g));
  return scale(mean(row_sum(square(trace.tilde_F - target))), 0.5);
}

Value dmd2_generator_objective(const PseudoVelocityModel& model, const ParamStore& params,
                               const ParamStore& fake_params, const VelocityField& teacher,
                               std::span<const int> labels, const DmdBaselineConfig& cfg,
                               const GuidanceConfig& guidance, Rng& rng) {
  const Matrix z = rng.normal_matrix(static_cast<Index>(labels.size()), model.dim());
  const RolloutTrace trace = cfg.sim_steps > 1 ? dmd2_backward_simulate(model, params, z, labels, cfg.sim_steps, rng)
                                               : backward_simulate(model, params, z, labels, 1);
  const Perturbation p = perturb(trace.endpoint, 1.0, rng);
  const Matrix v_fake = evaluate(model, fake_params, p.xt, p.t, p.t, labels);
  const Matrix v_teacher = cfg_velocity(teacher, p.xt, p.t, labels, guidance);
  return dmd2_generator_loss(trace, v_fake, v_teacher);
}

}  // namespace fsf
