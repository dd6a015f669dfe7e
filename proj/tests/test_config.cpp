#include "fsf/artifacts.hpp"
#include "fsf/bench.hpp"
#include "fsf/checkpoint.hpp"
#include "fsf/config.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

namespace fsf {
namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("fsf-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

TEST(Config, JsonRoundTrip) {
  for (auto m : {Method::TeacherCfm, Method::Ct, Method::Cd, Method::FsfDmd, Method::Dmd2, Method::FsfScratch}) {
    const auto cfg = ExperimentConfig::defaults_for(m);
    const auto j = to_json(cfg);
    EXPECT_EQ(to_json(config_from_json(j)), j) << to_string(m);
    EXPECT_EQ(method_from_string(to_string(m)), m);
  }
}

TEST(Config, MethodDefaults) {
  const auto scratch = config_from_json({{"method", "fsf-scratch"}});
  EXPECT_DOUBLE_EQ(scratch.fsf.lambda, 0.01);
  EXPECT_EQ(scratch.fsf.weight_mode, WeightMode::Cosine);
  EXPECT_DOUBLE_EQ(scratch.fsf.gamma_shift, 1.0);
  EXPECT_EQ(scratch.fsf.sim_steps, 1);
  const auto distill = config_from_json({{"method", "fsf-dmd"}});
  EXPECT_DOUBLE_EQ(distill.fsf.lambda, 0.05);
  EXPECT_EQ(distill.fsf.weight_mode, WeightMode::Adaptive);
  EXPECT_DOUBLE_EQ(distill.fsf.gamma_shift, 10.0);
  EXPECT_DOUBLE_EQ(distill.fsf.guidance.scale, 6.0);
  EXPECT_EQ(distill.batch_size, 128);
  EXPECT_DOUBLE_EQ(distill.consistency.jvp_eps, 0.005);
  EXPECT_DOUBLE_EQ(config_from_json({{"method", "cd"}}).fsf.lambda, 0.0);
}

TEST(Config, RejectsUnknownAndMistypedKeys) {
  EXPECT_THROW(config_from_json({{"stpes", 10}}), ConfigError);
  EXPECT_THROW(config_from_json({{"steps", "ten"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"method", "gan"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"fsf", {{"guidance", 1}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"steps", 0}}), ConfigError);
}

TEST(Config, Overrides) {
  nlohmann::json j = nlohmann::json::object();
  apply_overrides(j, {"fsf.lambda=0.2", "method=fsf-scratch", "guidance.scale=1.5", "output_dir=out/x"});
  const auto cfg = config_from_json(j);
  EXPECT_EQ(cfg.method, Method::FsfScratch);
  EXPECT_DOUBLE_EQ(cfg.fsf.lambda, 0.2);
  EXPECT_DOUBLE_EQ(cfg.fsf.guidance.scale, 1.5);
  EXPECT_EQ(cfg.output_dir, "out/x");
  EXPECT_THROW(apply_override(j, "nonsense"), ConfigError);
  EXPECT_THROW(apply_override(j, "fsf.nope=1"), ConfigError);
}

TEST(Config, UnstableCombinationNeedsOptIn) {
  EXPECT_THROW(config_from_json({{"method", "fsf-dmd"}, {"distill", {{"include_cd", false}}}}), ConfigError);
}

TEST(Hashing, GitBlobHash) {
  EXPECT_EQ(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
  EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  auto a = ExperimentConfig::defaults_for(Method::Cd);
  auto b = a;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed = 1;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Checkpoint c;
  c.header = {{"method", "cd"}, {"seed", 3}};
  c.params.add("layer.w", (Matrix(2, 3) << 1.0 / 3, -2.5e-300, 7, 0, 1e300, -0.0).finished());
  c.params.add("layer.b", Matrix::Constant(1, 3, 0.1));
  c.params.set_step_count(42);
  c.ema = EmaState::from_params(c.params, 0.999);
  c.adam = AdamState::for_params(c.params, 1e-3);
  c.adam->step = 42;
  const auto path = scratch_dir("ckpt") / "model.ckpt";
  save_checkpoint(path, c);
  const Checkpoint r = load_checkpoint(path);
  EXPECT_TRUE(r.params.bit_equal(c.params));
  EXPECT_EQ(r.params.step_count(), 42u);
  EXPECT_EQ(r.header, c.header);
  ASSERT_TRUE(r.ema && r.adam);
  EXPECT_EQ(r.ema->decay, 0.999);
  EXPECT_TRUE(r.ema->shadow.at("layer.w").cwiseEqual(c.params.at("layer.w").data()).all());
  EXPECT_EQ(r.adam->step, 42u);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto dir = scratch_dir("corrupt");
  Checkpoint c;
  c.params.add("w", Matrix::Ones(4, 4));
  save_checkpoint(dir / "ok.ckpt", c);
  std::ifstream in(dir / "ok.ckpt", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 9);
  std::string bad = bytes;
  bad[0] = 'X';
  std::ofstream(dir / "magic.ckpt", std::ios::binary) << bad;
  EXPECT_THROW(load_checkpoint(dir / "short.ckpt"), std::runtime_error);
  EXPECT_THROW(load_checkpoint(dir / "magic.ckpt"), std::runtime_error);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), std::runtime_error);
}

TEST(Artifacts, SamplesCsvRoundTrip) {
  const Matrix x = (Matrix(3, 2) << 0.1, 1.0 / 3, -2e-17, 5, 7.25, -1).finished();
  const std::vector<int> labels{2, -1, 0};
  const auto path = (scratch_dir("csv") / "s.csv").string();
  write_text_file(path, samples_csv(x, labels));
  std::vector<int> back;
  const Matrix r = read_samples_csv(path, &back);
  EXPECT_TRUE(r.cwiseEqual(x).all());
  EXPECT_EQ(back, labels);
  for (double v : {0.1, 1.0 / 3, 1e-300, -123456.789}) EXPECT_EQ(std::stod(format_double(v)), v);
}

TEST(Bench, MatrixValidation) {
  nlohmann::json ok = {{"seeds", {0}},
                       {"cells", {{{"name", "a"}, {"set", {"method=ct", "steps=5"}}},
                                  {{"name", "b"}, {"set", {"method=ct", "steps=5"}}, {"init_from", "a"}}}}};
  EXPECT_NO_THROW(bench_matrix_from_json(ok));
  auto one = ok;
  one["cells"].erase(1);
  EXPECT_THROW(bench_matrix_from_json(one), ConfigError);
  auto dup = ok;
  dup["cells"][1]["name"] = "a";
  EXPECT_THROW(bench_matrix_from_json(dup), ConfigError);
  auto forward = ok;
  forward["cells"][0]["init_from"] = "b";
  EXPECT_THROW(bench_matrix_from_json(forward), ConfigError);
  auto bad_key = ok;
  bad_key["cells"][0]["set"] = {"fsf.nope=1"};
  EXPECT_THROW(bench_matrix_from_json(bad_key), ConfigError);
  auto extra = ok;
  extra["colour"] = "red";
  EXPECT_THROW(bench_matrix_from_json(extra), ConfigError);
}

}  // namespace
}  // namespace fsf
