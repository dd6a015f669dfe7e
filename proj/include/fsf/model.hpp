#pragma once

// Two-time pseudo-velocity networks F(x; t, s, c).
//
// A model object holds only the architecture; weights live in a ParamStore
// passed to every call, so the same model evaluates live, EMA or frozen
// teacher weights interchangeably.

#include "fsf/params.hpp"
#include "fsf/rng.hpp"

#include <json.hpp>

#include <memory>
#include <span>
#include <vector>

namespace fsf {

/// Class label meaning "no condition" (the null class used for CFG).
inline constexpr int kNullLabel = -1;

class PseudoVelocityModel {
 public:
  virtual ~PseudoVelocityModel() = default;

  virtual int dim() const = 0;
  virtual Value forward(const ParamStore& params, const Value& x, std::span<const double> t, std::span<const double> s,
                        std::span<const int> labels) const = 0;
  virtual ParamStore init_params(Rng& rng) const = 0;
  /// Architecture description stored in checkpoint headers.
  virtual nlohmann::json describe() const = 0;
};

struct MlpArchitecture {
  int dim = 2;
  std::vector<int> hidden{128, 128, 128};
  int time_freqs = 8;
  int num_classes = 0;
  int class_embed_dim = 8;

  int input_width() const { return dim + 4 * time_freqs + class_embed_dim; }
};

/// MLP with SiLU activations over [x, sin/cos(t), sin/cos(s), class embedding].
/// The output layer starts at zero, so a fresh network predicts F = 0.
class MlpPseudoVelocity final : public PseudoVelocityModel {
 public:
  explicit MlpPseudoVelocity(MlpArchitecture arch);

  int dim() const override { return arch_.dim; }
  const MlpArchitecture& architecture() const { return arch_; }
  Value forward(const ParamStore& params, const Value& x, std::span<const double> t, std::span<const double> s,
                std::span<const int> labels) const override;
  ParamStore init_params(Rng& rng) const override;
  nlohmann::json describe() const override;

  /// Angular frequencies of the sinusoidal time features.
  std::vector<double> frequencies() const;

 private:
  Matrix time_features(std::span<const double> times) const;

  MlpArchitecture arch_;
};

/// Exact flow map of Gaussian data N(mu, sigma^2 I), with mu and sigma as
/// trainable parameters. At the data's (mu, sigma) it reproduces the true
/// average velocity for every (t, s), which makes it an analytic stand-in
/// for a perfectly trained generator.
class GaussianFlowModel final : public PseudoVelocityModel {
 public:
  explicit GaussianFlowModel(int dim) : dim_(dim) {}

  int dim() const override { return dim_; }
  Value forward(const ParamStore& params, const Value& x, std::span<const double> t, std::span<const double> s,
                std::span<const int> labels) const override;
  ParamStore init_params(Rng& rng) const override;
  nlohmann::json describe() const override;

  static ParamStore params_for(const Vector& mu, double sigma);

 private:
  int dim_;
};

std::unique_ptr<PseudoVelocityModel> model_from_json(const nlohmann::json& description);

/// Forward pass without graph recording; returns plain data.
Matrix evaluate(const PseudoVelocityModel& model, const ParamStore& params, const Matrix& x, std::span<const double> t,
                std::span<const double> s, std::span<const int> labels);

}  // namespace fsf
