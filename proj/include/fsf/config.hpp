#pragma once

#include "fsf/distill.hpp"
#include "fsf/gaussian_mixture.hpp"

#include <json.hpp>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace fsf {

/// Malformed config files, unknown keys, or badly typed overrides.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Method { TeacherCfm, Ct, Cd, FsfDmd, Dmd2, FsfScratch };

std::string to_string(Method m);
Method method_from_string(const std::string& name);

struct ModelConfig {
  std::vector<int> hidden{128, 128, 128};
  int time_freqs = 8;
  int class_embed_dim = 8;
  bool conditional = true;
};

struct DistillExtras {
  bool include_cd = true;
  bool allow_unstable = false;
  int lambda_warmup_steps = 0;
};

struct EvalConfig {
  int samples = 8192;
  int steps = 2;           // flow-map sampling steps
  int teacher_steps = 64;  // Euler steps for velocity models
  int projections = 256;
  int every = 0;           // 0: evaluate only at the end
  double coverage_radius = 3.0;
  bool class_conditional = true;
};

struct ExperimentConfig {
  std::string preset = "gm8-ring";
  nlohmann::json dataset_overrides = nlohmann::json::object();
  Method method = Method::FsfDmd;
  int steps = 20000;
  int batch_size = 128;
  std::uint64_t seed = 0;
  double learning_rate = 1e-3;
  double fake_learning_rate = 1e-3;
  double ema_decay = 0.99995;
  double label_dropout = 0.1;
  int log_every = 100;
  std::string output_dir = "runs/default";

  ModelConfig model;
  ConsistencyConfig consistency;
  FsfConfig fsf;
  DistillExtras distill;
  DmdBaselineConfig dmd2;
  EvalConfig eval;

  /// Defaults for a method; the from-scratch variant uses its own lambda,
  /// weighting, shift and simulation settings.
  static ExperimentConfig defaults_for(Method method);

  GaussianMixtureSpec dataset() const;
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Strict parse: every key must exist in the schema and carry the right type.
ExperimentConfig config_from_json(const nlohmann::json& j);

/// Applies "dotted.key=value" overrides to a config JSON in place. The value
/// is read as JSON when it parses, as a bare string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Applies a list of overrides, any method override first.
void apply_overrides(nlohmann::json& j, const std::vector<std::string>& overrides);

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});
nlohmann::json read_json_file(const std::string& path);

/// Git blob hash (SHA-1 of "blob <len>\0<bytes>") as lowercase hex.
std::string git_blob_hash(const std::string& bytes);
/// Hash of the canonical serialization of a config.
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace fsf
