#pragma once

#include "fsf/gaussian_mixture.hpp"
#include "fsf/rng.hpp"

#include <json.hpp>

#include <vector>

namespace fsf {

/// Root of the mean, over random unit directions, of the squared 1-D W2
/// distance between the projected empirical distributions.
double sliced_w2(const Matrix& a, const Matrix& b, int projections, Rng& rng);

/// Exact squared W2 between two 1-D empirical distributions (uniform weights).
double w2_squared_1d(std::vector<double> a, std::vector<double> b);

/// Biased squared MMD with kernel exp(-|x - y|^2 / (2 h^2)), clamped at 0.
double mmd_rbf(const Matrix& a, const Matrix& b, double bandwidth);

/// Median pairwise distance over (a deterministic subsample of) the union.
double median_bandwidth(const Matrix& a, const Matrix& b, Index max_points = 1024);

/// 2 E|A - B| - E|A - A'| - E|B - B'| over all empirical pairs.
double energy_distance(const Matrix& a, const Matrix& b);

struct ModeCoverage {
  double coverage = 0;
  std::vector<double> mass;
  std::vector<double> mean_distance;
};

/// A mode counts as covered when at least half its weight lands nearest to
/// it and those samples sit within radius_multiple * sigma_k on average.
ModeCoverage mode_coverage(const Matrix& samples, const GaussianMixtureSpec& spec, double radius_multiple);

struct MetricReport {
  double sw2 = 0;
  double mmd = 0;
  double energy = 0;
  ModeCoverage modes;
};

struct MetricOptions {
  int projections = 256;
  double coverage_radius = 3.0;
  bool with_kernel_metrics = true;
};

MetricReport compute_metrics(const Matrix& samples, const Matrix& reference, const GaussianMixtureSpec& spec,
                             const MetricOptions& opts, Rng& rng);

nlohmann::json to_json(const MetricReport& r);

}  // namespace fsf
