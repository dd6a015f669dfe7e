#include "fsf/interpolant.hpp"
#include "fsf/trainer.hpp"

#include <gtest/gtest.h>

#include <filesystem>

namespace fsf {
namespace {

ExperimentConfig tiny(Method m, int steps = 30) {
  nlohmann::json j = {{"method", to_string(m)},
                      {"steps", steps},
                      {"batch_size", 32},
                      {"log_every", 10},
                      {"ema_decay", 0.9},
                      {"model", {{"hidden", {32, 32}}, {"time_freqs", 4}}},
                      {"eval", {{"samples", 512}, {"teacher_steps", 8}, {"projections", 32}}}};
  return config_from_json(j);
}

RunOptions quiet() {
  RunOptions o;
  o.write_outputs = false;
  return o;
}

const Checkpoint& tiny_teacher() {
  static const Checkpoint t = train_teacher(tiny(Method::TeacherCfm, 60), quiet()).checkpoint;
  return t;
}

void expect_same_run(const RunResult& a, const RunResult& b) {
  EXPECT_TRUE(a.checkpoint.params.bit_equal(b.checkpoint.params));
  EXPECT_EQ(a.log.csv_without_timing(), b.log.csv_without_timing());
  ASSERT_TRUE(a.final_metrics && b.final_metrics);
  EXPECT_EQ(to_json(*a.final_metrics).dump(), to_json(*b.final_metrics).dump());
}

TEST(Determinism, EveryMethodReproducesBitForBit) {
  for (auto m : {Method::TeacherCfm, Method::Ct, Method::FsfScratch}) {
    SCOPED_TRACE(to_string(m));
    expect_same_run(run_experiment(tiny(m), nullptr, nullptr, quiet()),
                    run_experiment(tiny(m), nullptr, nullptr, quiet()));
  }
  for (auto m : {Method::Cd, Method::FsfDmd, Method::Dmd2}) {
    SCOPED_TRACE(to_string(m));
    auto cfg = tiny(m, 10);
    expect_same_run(run_experiment(cfg, &tiny_teacher(), nullptr, quiet()),
                    run_experiment(cfg, &tiny_teacher(), nullptr, quiet()));
  }
}

TEST(Determinism, SeedChangesTheRun) {
  auto a = tiny(Method::Ct, 5);
  auto b = a;
  b.seed = 1;
  EXPECT_FALSE(run_experiment(a, nullptr, nullptr, quiet())
                   .checkpoint.params.bit_equal(run_experiment(b, nullptr, nullptr, quiet()).checkpoint.params));
}

TEST(Reduction, FsfWithZeroLambdaIsConsistencyDistillation) {
  auto cd = tiny(Method::Cd, 15);
  auto fsf = tiny(Method::FsfDmd, 15);
  fsf.fsf.lambda = 0.0;
  const auto a = distill(cd, tiny_teacher(), nullptr, quiet());
  const auto b = distill(fsf, tiny_teacher(), nullptr, quiet());
  EXPECT_TRUE(a.checkpoint.params.bit_equal(b.checkpoint.params));
}

TEST(Reduction, ScratchWithZeroLambdaIsConsistencyTraining) {
  auto ct = tiny(Method::Ct, 15);
  auto fsf = tiny(Method::FsfScratch, 15);
  fsf.fsf.lambda = 0.0;
  const auto a = train_scratch(ct, quiet());
  const auto b = train_scratch(fsf, quiet());
  EXPECT_TRUE(a.checkpoint.params.bit_equal(b.checkpoint.params));
}

TEST(Registry, Dmd2AllocatesASecondNetwork) {
  const auto fsf = distill(tiny(Method::FsfDmd, 2), tiny_teacher(), nullptr, quiet());
  const auto dmd2 = distill(tiny(Method::Dmd2, 2), tiny_teacher(), nullptr, quiet());
  EXPECT_EQ(fsf.registry.trainable.size(), 1u);
  EXPECT_EQ(dmd2.registry.trainable.size(), 2u);
  EXPECT_EQ(dmd2.registry.total(), 2 * fsf.registry.total());
  // ttur 5: five fake updates per generator update
  EXPECT_EQ(dmd2.updates, 2u * 6u);
  EXPECT_EQ(fsf.updates, 2u);
}

TEST(Distill, InitCheckpointAndTeacherUntouched) {
  const auto first = distill(tiny(Method::Cd, 5), tiny_teacher(), nullptr, quiet());
  EXPECT_EQ(first.manifest.value("generator_init", ""), "teacher");
  const auto second = distill(tiny(Method::Cd, 5), tiny_teacher(), &first.checkpoint, quiet());
  EXPECT_EQ(second.manifest.value("generator_init", ""), "checkpoint");
  EXPECT_THROW(run_experiment(tiny(Method::Cd, 5), nullptr, nullptr, quiet()), ConfigError);
}

TEST(Divergence, NonFiniteLossStopsTheRunWithASnapshot) {
  auto cfg = tiny(Method::Ct, 5);
  cfg.preset = "g1";
  cfg.dataset_overrides = {{"mu", {1e200}}};
  const auto dir = std::filesystem::temp_directory_path() / "fsf-test-diverge";
  std::filesystem::remove_all(dir);
  cfg.output_dir = dir.string();
  EXPECT_THROW(train_scratch(cfg), DivergenceError);
  EXPECT_TRUE(std::filesystem::exists(dir / "last_good.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "divergence.json"));
}

TEST(Outputs, RunDirectoryContents) {
  auto cfg = tiny(Method::Ct, 10);
  const auto dir = std::filesystem::temp_directory_path() / "fsf-test-outputs";
  std::filesystem::remove_all(dir);
  cfg.output_dir = dir.string();
  const auto res = train_scratch(cfg);
  for (const char* f : {"model.ckpt", "log.csv", "manifest.json", "metrics.json", "samples.svg"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  const auto back = load_checkpoint(dir / "model.ckpt");
  EXPECT_TRUE(back.params.bit_equal(res.checkpoint.params));
  const auto again = evaluate_checkpoint(back, cfg);
  EXPECT_EQ(to_json(again).dump(), to_json(*res.final_metrics).dump());
}

TEST(Sampling, ClassFilterAndSeed) {
  const auto& t = tiny_teacher();
  const auto a = sample_checkpoint(t, 64, 4, 3, 2);
  const auto b = sample_checkpoint(t, 64, 4, 3, 2);
  EXPECT_TRUE(a.x.cwiseEqual(b.x).all());
  for (int l : a.labels) EXPECT_EQ(l, 2);
  EXPECT_THROW(sample_checkpoint(t, 64, 4, 3, 9), std::invalid_argument);
}

// Slower oracle checks on the single-Gaussian preset.

TEST(GaussianOracle, TeacherLearnsTheMarginalVelocity) {
  nlohmann::json j = {{"method", "teacher-cfm"},
                      {"dataset", {{"preset", "g1"}}},
                      {"steps", 5000},
                      {"batch_size", 1024},
                      {"ema_decay", 0.999},
                      {"log_every", 1000},
                      {"model", {{"hidden", {64, 64}}}}};
  const auto cfg = config_from_json(j);
  const auto res = train_teacher(cfg, quiet());
  const auto model = model_from_json(res.checkpoint.header.at("model"));
  const auto params = inference_params(res.checkpoint);
  const auto spec = cfg.dataset();
  double se = 0;
  Index count = 0;
  for (double t = 0.05; t < 0.96; t += 0.05) {
    const double rho = std::sqrt((1 - t) * (1 - t) + t * t);
    Matrix x(41, 1);
    for (Index i = 0; i < 41; ++i) x(i, 0) = 2 * (1 - t) + rho * (-2 + 4.0 * i / 40);
    const std::vector<double> tv(41, t);
    const std::vector<int> labels(41, 0);
    se += (evaluate(*model, params, x, tv, tv, labels) - gm_marginal_velocity(spec, x, tv)).squaredNorm();
    count += 41;
  }
  EXPECT_LT(se / count, 2e-3);
}

TEST(GaussianOracle, FlowMapLearnsTheShift) {
  nlohmann::json j = {{"method", "ct"},
                      {"dataset", {{"preset", "g1"}}},
                      {"steps", 5000},
                      {"ema_decay", 0.999},
                      {"log_every", 1000}};
  const auto res = train_scratch(config_from_json(j), quiet());
  const auto model = model_from_json(res.checkpoint.header.at("model"));
  const auto params = inference_params(res.checkpoint);
  const Index n = 201;
  Matrix z(n, 1);
  for (Index i = 0; i < n; ++i) z(i, 0) = -3 + 6.0 * i / (n - 1);
  const std::vector<double> t(n, 1.0), s(n, 0.0);
  const std::vector<int> labels(n, 0);
  const Matrix x = z - evaluate(*model, params, z, t, s, labels);
  EXPECT_LT((x.array() - z.array() - 2.0).square().mean(), 0.05);
}

}  // namespace
}  // namespace fsf
