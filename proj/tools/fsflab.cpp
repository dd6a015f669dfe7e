#include "fsf/artifacts.hpp"
#include "fsf/bench.hpp"
#include "fsf/config.hpp"
#include "fsf/trainer.hpp"
#include "fsf/verify.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitVerify = 3;
constexpr int kExitDivergence = 4;

struct RunFlags {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
};

void add_run_flags(CLI::App* cmd, RunFlags& f, bool config_required) {
  auto* c = cmd->add_option("--config", f.config, "experiment config (JSON)");
  if (config_required) c->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", f.overrides, "dotted.key=value override (repeatable)");
  cmd->add_option("--seed", f.seed, "seed (falls back to FSF_SEED, then the config)");
  cmd->add_option("--out", f.out, "output directory (overrides output_dir)");
  cmd->add_flag("--quiet", f.quiet, "suppress progress lines");
}

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("FSF_SEED");
  if (!v || !*v) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto s = std::stoull(v, &used);
    if (used != std::string(v).size()) throw std::invalid_argument("trailing characters");
    return s;
  } catch (const std::exception&) {
    throw fsf::ConfigError(std::string("FSF_SEED='") + v + "' is not a non-negative integer");
  }
}

fsf::ExperimentConfig build_config(const RunFlags& f, const std::vector<std::string>& forced) {
  nlohmann::json j = f.config.empty() ? nlohmann::json::object() : fsf::read_json_file(f.config);
  std::vector<std::string> all = f.overrides;
  all.insert(all.end(), forced.begin(), forced.end());
  fsf::apply_overrides(j, all);
  if (const auto s = f.seed ? f.seed : env_seed()) j["seed"] = *s;
  if (!f.out.empty()) j["output_dir"] = f.out;
  return fsf::config_from_json(j);
}

fsf::RunOptions run_options(const RunFlags& f) {
  fsf::RunOptions o;
  if (!f.quiet) {
    o.on_log = [](const fsf::LogRecord& r) {
      std::cerr << "step " << r.step << "  cd " << r.loss_cd << "  fsf " << r.loss_fsf << "  gen " << r.loss_gen
                << "  fake " << r.loss_fake << "  cfm " << r.loss_cfm << "  ct " << r.loss_ct;
      if (r.metrics) std::cerr << "  sw2 " << r.metrics->sw2 << "  coverage " << r.metrics->modes.coverage;
      std::cerr << "  (" << r.sec_per_step << " s/step)\n";
    };
  }
  return o;
}

void report(const fsf::ExperimentConfig& cfg, const fsf::RunResult& r) {
  std::cout << "method " << fsf::to_string(cfg.method) << ", seed " << cfg.seed << ", " << cfg.steps << " steps\n";
  if (r.final_metrics) std::cout << fsf::to_json(*r.final_metrics).dump(2) << "\n";
  std::cout << "outputs in " << cfg.output_dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flow-map distillation lab on Gaussian-mixture data"};
  app.require_subcommand(1);

  bool verify_json = false;
  std::string canary;
  auto* verify = app.add_subcommand("verify", "run the identity and gradient suite");
  verify->add_flag("--json", verify_json, "print a JSON report");
  verify->add_option("--canary", canary, "inject a documented mutation")
      ->check(CLI::IsMember(fsf::canary_names()));

  RunFlags teacher_flags;
  auto* teacher = app.add_subcommand("train-teacher", "train a CFM velocity teacher");
  add_run_flags(teacher, teacher_flags, true);

  RunFlags distill_flags;
  std::string method, teacher_path, init_path;
  auto* distill = app.add_subcommand("distill", "distill a flow-map generator from a teacher");
  add_run_flags(distill, distill_flags, true);
  distill->add_option("--method", method, "cd, dmd2 or fsf")->required()->check(CLI::IsMember({"cd", "dmd2", "fsf"}));
  distill->add_option("--teacher", teacher_path, "teacher checkpoint")->required()->check(CLI::ExistingFile);
  distill->add_option("--init", init_path, "generator initialization checkpoint")->check(CLI::ExistingFile);

  RunFlags scratch_flags;
  auto* scratch = app.add_subcommand("train-scratch", "train a flow map from data (ct or fsf-scratch)");
  add_run_flags(scratch, scratch_flags, true);

  std::string ckpt_path, sample_out = "samples";
  int n = 8192, steps = 2;
  std::optional<int> class_filter;
  std::optional<std::uint64_t> sample_seed;
  auto* sample = app.add_subcommand("sample", "generate samples from a checkpoint");
  sample->add_option("--ckpt", ckpt_path, "checkpoint")->required()->check(CLI::ExistingFile);
  sample->add_option("--n", n, "number of samples")->check(CLI::NonNegativeNumber);
  sample->add_option("--steps", steps, "sampler steps")->check(CLI::PositiveNumber);
  sample->add_option("--class", class_filter, "generate one class only (-1 for unconditional)");
  sample->add_option("--seed", sample_seed, "seed (falls back to FSF_SEED, then 0)");
  sample->add_option("--out", sample_out, "output directory");

  std::string eval_ckpt, ref_preset, eval_out;
  RunFlags eval_flags;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint against a reference distribution");
  eval->add_option("--ckpt", eval_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--ref-preset", ref_preset, "reference preset (default: the checkpoint's own data)");
  eval->add_option("--config", eval_flags.config, "config supplying the eval section")->check(CLI::ExistingFile);
  eval->add_option("--set", eval_flags.overrides, "dotted.key=value override (repeatable)");
  eval->add_option("--seed", eval_flags.seed, "evaluation seed");
  eval->add_option("--out", eval_out, "write the metric report to this JSON file");

  std::string matrix_path, bench_teacher;
  auto* bench = app.add_subcommand("bench", "run a config matrix over seeds");
  bench->add_option("--matrix", matrix_path, "bench matrix (JSON)")->required()->check(CLI::ExistingFile);
  bench->add_option("--teacher", bench_teacher, "teacher checkpoint for distillation cells")
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (verify->parsed()) {
      const auto hooks = canary.empty() ? fsf::VerifyHooks{} : fsf::canary_hooks(canary);
      const auto rep = fsf::run_verify(hooks);
      if (verify_json) {
        std::cout << rep.to_json().dump(2) << "\n";
      } else {
        std::cout << rep.table();
      }
      if (!rep.passed()) {
        for (const auto& c : rep.checks) {
          if (!c.passed) {
            std::cerr << "FAILED " << c.name << ": measured " << c.measured << " > tolerance " << c.tolerance << "\n";
          }
        }
        return kExitVerify;
      }
      return 0;
    }
    if (teacher->parsed()) {
      const auto cfg = build_config(teacher_flags, {"method=teacher-cfm"});
      report(cfg, fsf::train_teacher(cfg, run_options(teacher_flags)));
      return 0;
    }
    if (distill->parsed()) {
      const std::string m = method == "fsf" ? "fsf-dmd" : method;
      const auto cfg = build_config(distill_flags, {"method=" + m});
      const auto t = fsf::load_checkpoint(teacher_path);
      std::optional<fsf::Checkpoint> init;
      if (!init_path.empty()) init = fsf::load_checkpoint(init_path);
      report(cfg, fsf::distill(cfg, t, init ? &*init : nullptr, run_options(distill_flags)));
      return 0;
    }
    if (scratch->parsed()) {
      auto cfg = build_config(scratch_flags, {});
      if (cfg.method != fsf::Method::Ct && cfg.method != fsf::Method::FsfScratch) {
        throw fsf::ConfigError("train-scratch: config method must be 'ct' or 'fsf-scratch'");
      }
      report(cfg, fsf::train_scratch(cfg, run_options(scratch_flags)));
      return 0;
    }
    if (sample->parsed()) {
      const auto ckpt = fsf::load_checkpoint(ckpt_path);
      const auto seed = sample_seed ? *sample_seed : env_seed().value_or(0);
      const auto g = fsf::sample_checkpoint(ckpt, n, steps, seed, class_filter);
      const auto spec = fsf::gm_from_json(ckpt.header.at("dataset"));
      const std::filesystem::path dir(sample_out);
      fsf::write_text_file((dir / "samples.csv").string(), fsf::samples_csv(g.x, g.labels));
      fsf::write_text_file((dir / "samples.svg").string(),
                           fsf::scatter_svg(g.x, g.labels, spec, ckpt.header.value("method", "samples")));
      std::cout << "wrote " << g.x.rows() << " samples to " << (dir / "samples.csv").string() << "\n";
      return 0;
    }
    if (eval->parsed()) {
      const auto ckpt = fsf::load_checkpoint(eval_ckpt);
      auto cfg = build_config(eval_flags, {});
      if (!eval_flags.seed && !env_seed()) cfg.seed = ckpt.header.value("seed", std::uint64_t{0});
      std::optional<fsf::GaussianMixtureSpec> ref;
      if (!ref_preset.empty()) ref = fsf::make_preset(ref_preset);
      const auto rep = fsf::evaluate_checkpoint(ckpt, cfg, ref ? &*ref : nullptr);
      const std::string text = fsf::to_json(rep).dump(2) + "\n";
      if (!eval_out.empty()) fsf::write_text_file(eval_out, text);
      std::cout << text;
      return 0;
    }
    if (bench->parsed()) {
      const auto matrix = fsf::load_bench_matrix(matrix_path);
      std::optional<fsf::Checkpoint> t;
      if (!bench_teacher.empty()) t = fsf::load_checkpoint(bench_teacher);
      const auto rep = fsf::run_bench(matrix, t ? &*t : nullptr, [](const fsf::BenchRun& r) {
        std::cerr << r.cell << " seed " << r.seed << ": "
                  << (r.ok ? "sw2 " + std::to_string(r.metrics.sw2) : "FAILED " + r.error) << "\n";
      });
      std::cout << rep.markdown();
      return 0;
    }
  } catch (const fsf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fsf::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const fsf::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
