#pragma once
// Identity suite: analytic and finite-difference checks that need no
// trained checkpoint.

#include "fsf/distill.hpp"

#include <functional>
#include <string>
#include <vector>

namespace fsf {

/// Replaceable entry points, so mutation canaries can be injected into the
/// suite without touching the library.
struct VerifyHooks {
  std::function<Vector(const Vector& v, const Vector& xt, double t)> score_from_velocity = fsf::score_from_velocity;
  std::function<Value(const Value& tilde_F, const Matrix& delta, std::span<const double> weights)> fsf_dmd_loss =
      [](const Value& f, const Matrix& d, std::span<const double> w) { return fsf::fsf_dmd_loss(f, d, w); };
  TimePairOrdering order_time_pair = order_and_mask;
};

/// Canary names: "score-sign", "drop-sg", "drop-reorder".
std::vector<std::string> canary_names();
/// Hooks with one documented mutation; throws std::invalid_argument for an unknown name.
VerifyHooks canary_hooks(const std::string& name);

struct CheckResult {
  std::string name;
  bool passed = false;
  double measured = 0;
  double tolerance = 0;
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  double seconds = 0;

  bool passed() const;
  std::string table() const;
  nlohmann::json to_json() const;
};

VerifyReport run_verify(const VerifyHooks& hooks = {});

// ---- reusable oracles --------------------------------------------------------

struct GradientComparison {
  double relative_error = 0;  // ||analytic - fd|| / max(||analytic||, ||fd||)
  double max_abs_error = 0;
  double analytic_norm = 0;
  std::size_t entries = 0;
};

using LossFn = std::function<Value(const ParamStore& params)>;

/// Central differences over every scalar of `params`, with every
/// stop-gradient and detach branch replayed at its recorded value. The loss
/// must consume its randomness identically on each call (reseed inside).
GradientComparison compare_with_finite_differences(const LossFn& loss, ParamStore& params, double step = 1e-5);

/// Relative error between two gradient maps over their shared keys.
double relative_gradient_error(const GradMap& a, const GradMap& b);

/// The small conditional network used by the gradient checks, with a
/// randomized output layer so that F is not identically zero.
MlpPseudoVelocity gradient_check_model(int classes = 3);
ParamStore gradient_check_params(const MlpPseudoVelocity& model, std::uint64_t seed);

/// (x_t - f*(x_t; t, 0)) / t of Gaussian data: the data-side counterpart of
/// the endpoint pseudo-velocity under the flow-map coupling.
VelocityField analytic_endpoint_velocity(const LinearGaussianFlow& flow);

struct StationarityResult {
  double delta_max = 0;      // max |delta| over the (x_t, t) grid
  double grad_max = 0;       // max |d loss / d param| over parameters and batches
  GradMap gradient;          // gradient of the last batch
};

/// FSF-DMD at the exact Gaussian flow map of `flow` against `teacher`, with
/// `rollout_steps` backward-simulation steps.
StationarityResult fsf_stationarity(const LinearGaussianFlow& flow, const VelocityField& teacher, int rollout_steps,
                                    std::uint64_t seed);

}  // namespace fsf
