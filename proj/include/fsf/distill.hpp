#pragma once

// Distribution-matching objectives for flow-map generators: the
// fake-score-free surrogate, its from-scratch self-teacher form, and the
// DMD2 baseline with an explicit fake velocity network.

#include "fsf/flowmap.hpp"

#include <span>
#include <vector>

namespace fsf {

/// gamma u / ((gamma - 1) u + 1)
double timestep_shift(double u, double gamma);

enum class WeightMode { Constant, Adaptive, Cosine, AdaptiveCosine };
enum class SimulationMode { FlowMap, Dmd2, None };

struct FsfConfig {
  double lambda = 0.05;
  WeightMode weight_mode = WeightMode::Adaptive;
  double constant_weight = 1.0;
  double gamma_shift = 10.0;
  GuidanceConfig guidance;
  int sim_steps = 2;
  SimulationMode sim_mode = SimulationMode::FlowMap;
  bool use_ema_fake_side = true;
  bool fake_side_null_label = false;

  void validate() const;
};

/// Generator output written as endpoint = base - tilde_F, where tilde_F
/// carries the gradient and everything else is plain data.
struct RolloutTrace {
  std::vector<double> times;
  std::vector<Matrix> states;
  Value tilde_F;
  Matrix base;
  Matrix endpoint;
  /// The generator's pseudo-velocity toward t = 0 used for weighting; equals
  /// tilde_F for flow-map simulation.
  Matrix pseudo_velocity;
};

/// M-step rollout with stop-gradient on every intermediate state:
/// tilde_F = (1/M) sum_i F(sg[x_{i/M}], i/M, (i-1)/M), endpoint = z - tilde_F.
RolloutTrace backward_simulate(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& z,
                               std::span<const int> labels, int steps);

/// DMD2-style simulation: an N-step chain with fresh-noise re-noising between
/// steps, then one differentiable step from the final sample re-noised to a
/// random grid time (N - j) / N, j ~ U{0..N-1} per row.
RolloutTrace dmd2_backward_simulate(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& z,
                                    std::span<const int> labels, int steps, Rng& rng);

/// Perturbation of generator samples: x_t = (1 - t) x + t z' with fresh z'.
struct Perturbation {
  std::vector<double> t;
  Matrix noise;
  Matrix xt;
};

/// t = timestep_shift(u, gamma) with u ~ U(1e-6, 1 - 1e-6).
Perturbation perturb(const Matrix& x, double gamma, Rng& rng);

struct DeltaResult {
  Matrix delta;
  Matrix v_teacher;
};

/// F_fake(x_t; t, 0, c) - cfg_velocity(x_t, t, c); plain data.
DeltaResult fsf_delta(const PseudoVelocityModel& model, const ParamStore& fake_params, const VelocityField& teacher,
                      const Matrix& xt, std::span<const double> t, std::span<const int> labels,
                      const GuidanceConfig& guidance, bool null_label_fake_side = false);

/// F(x_t; t, 0) - F(x_t; t, t) from one network; plain data.
Matrix scratch_delta(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& xt,
                     std::span<const double> t, std::span<const int> labels);

/// mean_i w_i ||tilde_F - sg[tilde_F - delta]||^2
Value fsf_dmd_loss(const Value& tilde_F, const Matrix& delta, std::span<const double> weights);
inline Value fsf_dmd_loss(const RolloutTrace& trace, const Matrix& delta, std::span<const double> weights) {
  return fsf_dmd_loss(trace.tilde_F, delta, weights);
}

inline constexpr double kAdaptiveWeightFloor = 1e-3;

/// 1 / max(mean_j |a_ij - b_ij|, floor) per row.
std::vector<double> adaptive_weight(const Matrix& tilde_F, const Matrix& v_teacher,
                                    double floor = kAdaptiveWeightFloor);

std::vector<double> dmd_weights(const FsfConfig& cfg, std::span<const double> t, const Matrix& pseudo_velocity,
                                const Matrix& v_teacher);

struct DmdDiagnostics {
  double delta_rms = 0;
  double mean_weight = 0;
};

/// The full surrogate term for one batch of labels: draw z, simulate,
/// perturb, form delta against the teacher and weight it.
Value fsf_dmd_objective(const PseudoVelocityModel& model, const ParamStore& params, const ParamStore& fake_params,
                        const VelocityField& teacher, std::span<const int> labels, const FsfConfig& cfg, Rng& rng,
                        DmdDiagnostics* diag = nullptr);

/// Self-teacher variant: delta from scratch_delta on `self_params`.
Value fsf_scratch_objective(const PseudoVelocityModel& model, const ParamStore& params, const ParamStore& self_params,
                            std::span<const int> labels, const FsfConfig& cfg, Rng& rng,
                            DmdDiagnostics* diag = nullptr);

// ---- DMD2 baseline -------------------------------------------------------

struct DmdBaselineConfig {
  int ttur_ratio = 5;
  bool ida = false;
  double ida_lambda = 0.97;
  int sim_steps = 1;

  void validate() const;
};

/// mean_i ||F_psi(x_t, t, t, c) - (z' - x)||^2 on detached generator samples.
Value dmd2_fake_loss(const PseudoVelocityModel& fake, const ParamStore& fake_params, const Matrix& xhat,
                     std::span<const int> labels, std::span<const double> t, const Matrix& noise);
Value dmd2_fake_loss(const PseudoVelocityModel& fake, const ParamStore& fake_params, const Matrix& xhat,
                     std::span<const int> labels, Rng& rng);

/// 1/2 mean_i ||tilde_F - sg[tilde_F - (v_fake - v_teacher) / |F - v_teacher|]||^2
Value dmd2_generator_loss(const RolloutTrace& trace, const Matrix& v_fake, const Matrix& v_teacher,
                          double floor = kAdaptiveWeightFloor);

/// Full generator term: simulate (single step, or DMD2-style when
/// sim_steps > 1), perturb with uniform t, query fake net and teacher.
Value dmd2_generator_objective(const PseudoVelocityModel& model, const ParamStore& params,
                               const ParamStore& fake_params, const VelocityField& teacher,
                               std::span<const int> labels, const DmdBaselineConfig& cfg,
                               const GuidanceConfig& guidance, Rng& rng);

}  // namespace fsf
