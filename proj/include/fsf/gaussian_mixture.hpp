#pragma once

// Isotropic Gaussian mixtures as analytic data distributions, together with
// the exact quantities of their linear-interpolant perturbations
// x_t = (1 - t) x + t z, z ~ N(0, I).

#include "fsf/rng.hpp"
#include "fsf/tensor.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace fsf {


/// Times below this are rejected by operations that divide by t.
inline constexpr double kMinTime = 1e-6;

struct GaussianMixtureSpec {
  std::vector<double> weights;
  std::vector<Vector> means;
  std::vector<double> stdevs;

  int dim() const { return means.empty() ? 0 : static_cast<int>(means.front().size()); }
  int components() const { return static_cast<int>(weights.size()); }

  /// Throws std::invalid_argument on any broken invariant.
  void validate() const;
  /// The single-Gaussian spec of component k (its class-conditional law).
  GaussianMixtureSpec component(int k) const;
};

/// 8 equal-weight components on the unit circle, sigma = 0.05.
GaussianMixtureSpec gm8_ring(double radius = 1.0, double sigma = 0.05);
/// Two equal-weight components at +mu and -mu.
GaussianMixtureSpec gm2_sym(const Vector& mu, double sigma);
/// A single Gaussian N(mu, sigma^2 I).
GaussianMixtureSpec g1(const Vector& mu, double sigma);

/// Builds a spec from a preset name ("gm8-ring", "gm2-sym", "g1") plus
/// optional JSON overrides (mu, sigma, radius, or full weights/means/stdevs).
GaussianMixtureSpec make_preset(const std::string& name, const nlohmann::json& overrides = nlohmann::json::object());

nlohmann::json to_json(const GaussianMixtureSpec& spec);
GaussianMixtureSpec gm_from_json(const nlohmann::json& j);

struct LabeledBatch {
  Matrix x;
  std::vector<int> labels;
};

/// Draws n labeled samples; the component index is the class label.
LabeledBatch sample_mixture(const GaussianMixtureSpec& spec, Index n, Rng& rng);

/// Draws one sample from component labels[i] for every i.
LabeledBatch sample_mixture_given_labels(const GaussianMixtureSpec& spec, std::span<const int> labels, Rng& rng);

/// Log density of the perturbed marginal p_t at x_t.
double gm_log_density(const GaussianMixtureSpec& spec, const Vector& xt, double t);
/// Posterior mean E[x | x_t].
Vector gm_posterior_mean(const GaussianMixtureSpec& spec, const Vector& xt, double t);
/// v*(x_t) = (x_t - E[x | x_t]) / t.
Vector gm_marginal_velocity(const GaussianMixtureSpec& spec, const Vector& xt, double t);
/// Gradient of gm_log_density with respect to x_t, from the mixture directly.
Vector gm_marginal_score(const GaussianMixtureSpec& spec, const Vector& xt, double t);

/// Row-wise marginal velocity for a batch with per-row times.
Matrix gm_marginal_velocity(const GaussianMixtureSpec& spec, const Matrix& xt, std::span<const double> t);

}  // namespace fsf
