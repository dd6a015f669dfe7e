#include "fsf/gaussian_mixture.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fsf {

namespace {

void require_time(double t, const char* op) {
  if (!(t >= kMinTime && t <= 1.0)) {
    throw std::invalid_argument(std::string(op) + ": time must lie in [1e-6, 1], got " + std::to_string(t));
  }
}

// Per-component log weights log(pi_k N(x_t; (1-t) mu_k, rho_k^2 I)) and the
// matching path variances.
struct ComponentTerms {
  std::vector<double> log_w;
  std::vector<double> var;
  double log_norm;  // log-sum-exp of log_w
};

ComponentTerms component_terms(const GaussianMixtureSpec& spec, const Vector& xt, double t) {
  if (xt.size() != spec.dim()) throw std::invalid_argument("Gaussian mixture: dimension mismatch");
  const int K = spec.components();
  const double d = static_cast<double>(spec.dim());
  ComponentTerms c;
  c.log_w.resize(K);
  c.var.resize(K);
  double max_lw = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < K; ++k) {
    const double sk = spec.stdevs[k];
    const double var = (1 - t) * (1 - t) * sk * sk + t * t;
    const double r2 = (xt - (1 - t) * spec.means[k]).squaredNorm();
    c.var[k] = var;
    c.log_w[k] = std::log(spec.weights[k]) - 0.5 * d * std::log(2 * std::numbers::pi * var) - 0.5 * r2 / var;
    max_lw = std::max(max_lw, c.log_w[k]);
  }
  double acc = 0;
  for (int k = 0; k < K; ++k) acc += std::exp(c.log_w[k] - max_lw);
  c.log_norm = max_lw + std::log(acc);
  if (!std::isfinite(c.log_norm)) throw NumericalError("Gaussian mixture: non-finite responsibilities");
  return c;
}

}  // namespace

void GaussianMixtureSpec::validate() const {
  if (weights.empty()) throw std::invalid_argument("Gaussian mixture: no components");
  if (means.size() != weights.size() || stdevs.size() != weights.size()) {
    throw std::invalid_argument("Gaussian mixture: weights, means and stdevs must have equal length");
  }
  double total = 0;
  for (double w : weights) {
    if (!(w > 0)) throw std::invalid_argument("Gaussian mixture: weights must be positive");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("Gaussian mixture: weights must sum to 1");
  for (double s : stdevs) {
    if (!(s > 0)) throw std::invalid_argument("Gaussian mixture: stdevs must be positive");
  }
  const auto d = means.front().size();
  if (d == 0) throw std::invalid_argument("Gaussian mixture: zero dimension");
  for (const auto& m : means) {
    if (m.size() != d) throw std::invalid_argument("Gaussian mixture: inconsistent mean dimensions");
  }
}

GaussianMixtureSpec GaussianMixtureSpec::component(int k) const {
  return g1(means.at(static_cast<std::size_t>(k)), stdevs.at(static_cast<std::size_t>(k)));
}

GaussianMixtureSpec gm8_ring(double radius, double sigma) {
  GaussianMixtureSpec s;
  for (int k = 0; k < 8; ++k) {
    const double a = 2 * std::numbers::pi * k / 8.0;
    Vector m(2);
    m << radius * std::cos(a), radius * std::sin(a);
    s.means.push_back(m);
    s.weights.push_back(1.0 / 8.0);
    s.stdevs.push_back(sigma);
  }
  s.validate();
  return s;
}

GaussianMixtureSpec gm2_sym(const Vector& mu, double sigma) {
  GaussianMixtureSpec s;
  s.means = {mu, -mu};
  s.weights = {0.5, 0.5};
  s.stdevs = {sigma, sigma};
  s.validate();
  return s;
}

GaussianMixtureSpec g1(const Vector& mu, double sigma) {
  GaussianMixtureSpec s;
  s.means = {mu};
  s.weights = {1.0};
  s.stdevs = {sigma};
  s.validate();
  return s;
}

namespace {

Vector vec_from_json(const nlohmann::json& j) {
  auto v = j.get<std::vector<double>>();
  return Eigen::Map<Vector>(v.data(), static_cast<Index>(v.size()));
}

}  // namespace

GaussianMixtureSpec make_preset(const std::string& name, const nlohmann::json& overrides) {
  if (overrides.contains("weights") || overrides.contains("means")) return gm_from_json(overrides);
  if (name == "gm8-ring") {
    return gm8_ring(overrides.value("radius", 1.0), overrides.value("sigma", 0.05));
  }
  if (name == "gm2-sym") {
    Vector mu = overrides.contains("mu") ? vec_from_json(overrides["mu"]) : Vector{{1.0, 0.0}};
    return gm2_sym(mu, overrides.value("sigma", 0.2));
  }
  if (name == "g1") {
    Vector mu = overrides.contains("mu") ? vec_from_json(overrides["mu"]) : Vector{{2.0}};
    return g1(mu, overrides.value("sigma", 1.0));
  }
  throw std::invalid_argument("unknown dataset preset '" + name + "'");
}

nlohmann::json to_json(const GaussianMixtureSpec& spec) {
  nlohmann::json means = nlohmann::json::array();
  for (const auto& m : spec.means) means.push_back(std::vector<double>(m.data(), m.data() + m.size()));
  return {{"weights", spec.weights}, {"means", means}, {"stdevs", spec.stdevs}};
}

GaussianMixtureSpec gm_from_json(const nlohmann::json& j) {
  GaussianMixtureSpec s;
  s.weights = j.at("weights").get<std::vector<double>>();
  for (const auto& m : j.at("means")) s.means.push_back(vec_from_json(m));
  s.stdevs = j.at("stdevs").get<std::vector<double>>();
  s.validate();
  return s;
}

LabeledBatch sample_mixture(const GaussianMixtureSpec& spec, Index n, Rng& rng) {
  LabeledBatch b;
  b.x.resize(n, spec.dim());
  b.labels.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const int k = rng.categorical(spec.weights);
    b.labels[static_cast<std::size_t>(i)] = k;
    for (int j = 0; j < spec.dim(); ++j) b.x(i, j) = spec.means[k](j) + spec.stdevs[k] * rng.normal();
  }
  return b;
}

LabeledBatch sample_mixture_given_labels(const GaussianMixtureSpec& spec, std::span<const int> labels, Rng& rng) {
  LabeledBatch b;
  b.x.resize(static_cast<Index>(labels.size()), spec.dim());
  b.labels.assign(labels.begin(), labels.end());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int k = labels[i];
    if (k < 0 || k >= spec.components()) throw std::invalid_argument("sample_mixture_given_labels: label out of range");
    for (int j = 0; j < spec.dim(); ++j) {
      b.x(static_cast<Index>(i), j) = spec.means[static_cast<std::size_t>(k)](j) + spec.stdevs[static_cast<std::size_t>(k)] * rng.normal();
    }
  }
  return b;
}

double gm_log_density(const GaussianMixtureSpec& spec, const Vector& xt, double t) {
  if (!(t >= 0 && t <= 1)) throw std::invalid_argument("gm_log_density: time must lie in [0, 1]");
  return component_terms(spec, xt, t).log_norm;
}

Vector gm_posterior_mean(const GaussianMixtureSpec& spec, const Vector& xt, double t) {
  require_time(t, "gm_posterior_mean");
  const auto c = component_terms(spec, xt, t);
  Vector mean = Vector::Zero(xt.size());
  for (int k = 0; k < spec.components(); ++k) {
    const double r = std::exp(c.log_w[k] - c.log_norm);
    const double s2 = spec.stdevs[k] * spec.stdevs[k];
    // Gaussian posterior of x given x_t within component k.
    const Vector mk = spec.means[k] + ((1 - t) * s2 / c.var[k]) * (xt - (1 - t) * spec.means[k]);
    mean += r * mk;
  }
  return mean;
}

Vector gm_marginal_velocity(const GaussianMixtureSpec& spec, const Vector& xt, double t) {
  require_time(t, "gm_marginal_velocity");
  return (xt - gm_posterior_mean(spec, xt, t)) / t;
}

Vector gm_marginal_score(const GaussianMixtureSpec& spec, const Vector& xt, double t) {
  require_time(t, "gm_marginal_score");
  const auto c = component_terms(spec, xt, t);
  Vector score = Vector::Zero(xt.size());
  for (int k = 0; k < spec.components(); ++k) {
    const double r = std::exp(c.log_w[k] - c.log_norm);
    score -= r * (xt - (1 - t) * spec.means[k]) / c.var[k];
  }
  return score;
}

Matrix gm_marginal_velocity(const GaussianMixtureSpec& spec, const Matrix& xt, std::span<const double> t) {
  if (static_cast<Index>(t.size()) != xt.rows()) throw std::invalid_argument("gm_marginal_velocity: time count mismatch");
  Matrix out(xt.rows(), xt.cols());
  for (Index i = 0; i < xt.rows(); ++i) {
    out.row(i) = gm_marginal_velocity(spec, Vector(xt.row(i).transpose()), t[static_cast<std::size_t>(i)]).transpose();
  }
  return out;
}

}  // namespace fsf
