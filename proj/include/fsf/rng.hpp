#pragma once

#include "fsf/tensor.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>

namespace fsf {

/// Seeded random source. One instance per run; never shared across threads.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  bool bernoulli(double p) { return uniform() < p; }
  int uniform_int(int lo, int hi_inclusive) { return std::uniform_int_distribution<int>(lo, hi_inclusive)(engine_); }

  double beta(double a, double b) {
    const double x = std::gamma_distribution<double>(a, 1.0)(engine_);
    const double y = std::gamma_distribution<double>(b, 1.0)(engine_);
    return x / (x + y);
  }

  int categorical(std::span<const double> weights) {
    double u = uniform();
    for (std::size_t k = 0; k + 1 < weights.size(); ++k) {
      if (u < weights[k]) return static_cast<int>(k);
      u -= weights[k];
    }
    return static_cast<int>(weights.size()) - 1;
  }

  Matrix normal_matrix(Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal();
    return m;
  }

  /// Independent child stream, so adding draws in one consumer never shifts
  /// another consumer's sequence.
  Rng split() { return Rng(engine_()); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace fsf
