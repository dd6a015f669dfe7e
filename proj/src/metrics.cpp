#include "fsf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fsf {

namespace {

void require_sets(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument(std::string(op) + ": empty sample set");
  if (a.cols() != b.cols()) throw std::invalid_argument(std::string(op) + ": dimension mismatch");
  if (!a.allFinite() || !b.allFinite()) throw NumericalError(std::string(op) + ": non-finite samples");
}

double mean_pair_distance(const Matrix& a, const Matrix& b) {
  double acc = 0;
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < b.rows(); ++j) acc += (a.row(i) - b.row(j)).norm();
  }
  return acc / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
}

double mean_kernel(const Matrix& a, const Matrix& b, double inv_two_h2) {
  double acc = 0;
  for (Index i = 0; i < a.rows(); ++i) {
    double row = 0;
    for (Index j = 0; j < b.rows(); ++j) row += std::exp(-(a.row(i) - b.row(j)).squaredNorm() * inv_two_h2);
    acc += row;
  }
  return acc / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
}

}  // namespace

double w2_squared_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("w2_squared_1d: empty sample set");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  // Both quantile functions are step functions; integrate over the merged
  // breakpoints i/na and j/nb.
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double p = 0, acc = 0;
  while (i < a.size() && j < b.size()) {
    const double next_a = static_cast<double>(i + 1) / na;
    const double next_b = static_cast<double>(j + 1) / nb;
    const double next = std::min(next_a, next_b);
    const double d = a[i] - b[j];
    acc += (next - p) * d * d;
    p = next;
    if (next_a <= next) ++i;
    if (next_b <= next) ++j;
  }
  return acc;
}

double sliced_w2(const Matrix& a, const Matrix& b, int projections, Rng& rng) {
  require_sets(a, b, "sliced_w2");
  if (projections < 1) throw std::invalid_argument("sliced_w2: projections must be >= 1");
  const Index d = a.cols();
  double acc = 0;
  std::vector<double> pa(static_cast<std::size_t>(a.rows())), pb(static_cast<std::size_t>(b.rows()));
  for (int k = 0; k < projections; ++k) {
    Vector u(d);
    for (Index j = 0; j < d; ++j) u(j) = rng.normal();
    u /= u.norm();
    Eigen::Map<Vector>(pa.data(), a.rows()) = a * u;
    Eigen::Map<Vector>(pb.data(), b.rows()) = b * u;
    acc += w2_squared_1d(pa, pb);
  }
  return std::sqrt(acc / projections);
}

double mmd_rbf(const Matrix& a, const Matrix& b, double bandwidth) {
  require_sets(a, b, "mmd_rbf");
  if (!(bandwidth > 0)) throw std::invalid_argument("mmd_rbf: bandwidth must be positive");
  const double c = 1.0 / (2 * bandwidth * bandwidth);
  return std::max(0.0, mean_kernel(a, a, c) + mean_kernel(b, b, c) - 2 * mean_kernel(a, b, c));
}

double median_bandwidth(const Matrix& a, const Matrix& b, Index max_points) {
  require_sets(a, b, "median_bandwidth");
  const Index n = a.rows() + b.rows();
  const Index stride = std::max<Index>(1, (n + max_points - 1) / max_points);
  std::vector<Index> pick;
  for (Index i = 0; i < n; i += stride) pick.push_back(i);
  auto row = [&](Index i) { return i < a.rows() ? a.row(i) : b.row(i - a.rows()); };
  std::vector<double> dist;
  for (std::size_t i = 0; i < pick.size(); ++i) {
    for (std::size_t j = i + 1; j < pick.size(); ++j) dist.push_back((row(pick[i]) - row(pick[j])).norm());
  }
  if (dist.empty()) return 1.0;
  auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
  std::nth_element(dist.begin(), mid, dist.end());
  return *mid > 0 ? *mid : 1.0;
}

double energy_distance(const Matrix& a, const Matrix& b) {
  require_sets(a, b, "energy_distance");
  const double e = 2 * mean_pair_distance(a, b) - mean_pair_distance(a, a) - mean_pair_distance(b, b);
  return std::max(0.0, e);
}

ModeCoverage mode_coverage(const Matrix& samples, const GaussianMixtureSpec& spec, double radius_multiple) {
  if (!(radius_multiple > 0)) throw std::invalid_argument("mode_coverage: radius multiple must be positive");
  if (samples.rows() > 0 && samples.cols() != spec.dim()) throw std::invalid_argument("mode_coverage: dimension mismatch");
  const int K = spec.components();
  ModeCoverage r;
  r.mass.assign(static_cast<std::size_t>(K), 0.0);
  r.mean_distance.assign(static_cast<std::size_t>(K), 0.0);
  std::vector<double> count(static_cast<std::size_t>(K), 0.0);
  for (Index i = 0; i < samples.rows(); ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
      const double dk = (samples.row(i).transpose() - spec.means[static_cast<std::size_t>(k)]).norm();
      if (dk < best_d) {
        best_d = dk;
        best = k;
      }
    }
    count[static_cast<std::size_t>(best)] += 1;
    r.mean_distance[static_cast<std::size_t>(best)] += best_d;
  }
  int covered = 0;
  for (std::size_t k = 0; k < count.size(); ++k) {
    if (count[k] > 0) r.mean_distance[k] /= count[k];
    r.mass[k] = samples.rows() > 0 ? count[k] / static_cast<double>(samples.rows()) : 0.0;
    if (count[k] > 0 && r.mass[k] >= 0.5 * spec.weights[k] && r.mean_distance[k] <= radius_multiple * spec.stdevs[k]) {
      ++covered;
    }
  }
  r.coverage = static_cast<double>(covered) / K;
  return r;
}

MetricReport compute_metrics(const Matrix& samples, const Matrix& reference, const GaussianMixtureSpec& spec,
                             const MetricOptions& opts, Rng& rng) {
  MetricReport r;
  r.sw2 = sliced_w2(samples, reference, opts.projections, rng);
  if (opts.with_kernel_metrics) {
    r.mmd = mmd_rbf(samples, reference, median_bandwidth(samples, reference));
    r.energy = energy_distance(samples, reference);
  }
  r.modes = mode_coverage(samples, spec, opts.coverage_radius);
  return r;
}

nlohmann::json to_json(const MetricReport& r) {
  return {{"sw2", r.sw2},
          {"mmd", r.mmd},
          {"energy_distance", r.energy},
          {"mode_coverage", r.modes.coverage},
          {"mode_mass", r.modes.mass},
          {"mode_mean_distance", r.modes.mean_distance}};
}

}  // namespace fsf
