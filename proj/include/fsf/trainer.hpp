#pragma once

#include "fsf/checkpoint.hpp"
#include "fsf/config.hpp"
#include "fsf/metrics.hpp"

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace fsf {

/// A run produced a non-finite loss or gradient and was stopped.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LogRecord {
  std::uint64_t step = 0;
  double loss_cd = 0;
  double loss_fsf = 0;
  double loss_fake = 0;
  double loss_gen = 0;
  double loss_cfm = 0;
  double loss_ct = 0;
  double sec_per_step = 0;
  std::optional<MetricReport> metrics;
  std::uint64_t updates = 0;  // optimizer updates so far, over all networks
};

struct TrainingLog {
  std::vector<LogRecord> records;

  std::string csv() const;
  /// The CSV without wall-clock columns; equal across reruns of one config.
  std::string csv_without_timing() const;
};

/// Trainable parameter stores allocated by a run, by role.
struct ParamRegistry {
  std::map<std::string, std::size_t> trainable;

  void add(const std::string& role, const ParamStore& store) { trainable[role] = store.scalar_count(); }
  std::size_t total() const;
};

struct RunResult {
  Checkpoint checkpoint;
  TrainingLog log;
  std::optional<MetricReport> final_metrics;
  ParamRegistry registry;
  nlohmann::json manifest;
  std::uint64_t updates = 0;
  double mean_sec_per_step = 0;
};

struct RunOptions {
  bool write_outputs = true;
  bool evaluate_final = true;
  std::function<void(const LogRecord&)> on_log;
};

std::unique_ptr<MlpPseudoVelocity> make_model(const ExperimentConfig& cfg, const GaussianMixtureSpec& spec);

/// Weights a checkpoint is evaluated and distilled with: the EMA shadow when
/// present, the live parameters otherwise.
ParamStore inference_params(const Checkpoint& ckpt);

enum class SamplerKind { Euler, FlowMap };

struct GeneratedSamples {
  Matrix x;
  std::vector<int> labels;
};

/// Draws class labels from the mixture weights (or the null class when
/// `class_conditional` is false) and generates from z ~ N(0, I).
GeneratedSamples generate_samples(const PseudoVelocityModel& model, const ParamStore& params,
                                  const GaussianMixtureSpec& spec, SamplerKind kind, int n, int steps,
                                  bool class_conditional, Rng& rng);

/// Fixed per-seed evaluation: reference data, generation and metrics all use
/// streams independent of training.
/// `reference` replaces the checkpoint's own data distribution when given.
MetricReport evaluate_checkpoint(const Checkpoint& ckpt, const ExperimentConfig& cfg,
                                 const GaussianMixtureSpec* reference = nullptr);

SamplerKind checkpoint_sampler(const Checkpoint& ckpt);

/// n samples with `steps` sampler steps; labels follow the mixture weights
/// unless `class_filter` fixes one class (kNullLabel for unconditional).
GeneratedSamples sample_checkpoint(const Checkpoint& ckpt, int n, int steps, std::uint64_t seed,
                                   std::optional<int> class_filter = std::nullopt);

RunResult train_teacher(const ExperimentConfig& cfg, const RunOptions& opts = {});
/// Methods cd, fsf-dmd and dmd2. Without `init` the generator starts from the teacher weights.
RunResult distill(const ExperimentConfig& cfg, const Checkpoint& teacher, const Checkpoint* init,
                  const RunOptions& opts = {});
/// Methods ct and fsf-scratch.
RunResult train_scratch(const ExperimentConfig& cfg, const RunOptions& opts = {});

RunResult run_experiment(const ExperimentConfig& cfg, const Checkpoint* teacher, const Checkpoint* init,
                         const RunOptions& opts = {});

}  // namespace fsf
