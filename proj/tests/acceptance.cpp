// End-to-end acceptance run: one PASS/FAIL line per criterion, plus
// informational lines that are printed but never gate the exit code.

#include "fsf/artifacts.hpp"
#include "fsf/bench.hpp"
#include "fsf/trainer.hpp"
#include "fsf/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <sys/wait.h>
#include <vector>

namespace fs = std::filesystem;
using namespace fsf;

namespace {

// Tolerances.
constexpr double kIdentitySeconds = 60;
constexpr double kGradientSeconds = 120;
constexpr double kStationarityGrad = 1e-5;
constexpr double kTeacherSw2 = 0.05;
constexpr double kTeacherSeconds = 600;
constexpr double kRunBudgetSeconds = 1200;
constexpr double kParamRatio = 1.9;
constexpr int kCostSteps = 200;

const fs::path kWork = "acceptance";

struct Verdict {
  int id;
  std::string title;
  bool pass;
  std::string detail;
  bool soft = false;
};

std::vector<Verdict> verdicts;

void record(Verdict v) {
  const char* tag = v.pass ? "PASS" : (v.soft ? "SOFT" : "FAIL");
  std::cout << "criterion " << v.id << " [" << tag << "] " << v.title << ": " << v.detail << std::endl;
  verdicts.push_back(std::move(v));
}

void info(const std::string& text) { std::cout << "    info: " << text << std::endl; }

std::string num(double v, const char* f = "%.5f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const CheckResult& check(const VerifyReport& rep, const std::string& name) {
  for (const auto& c : rep.checks) {
    if (c.name == name) return c;
  }
  throw std::runtime_error("verify report has no check " + name);
}

// Every named check passed; detail lists the worst measured/tolerance ratio.
std::pair<bool, std::string> all_pass(const VerifyReport& rep, const std::vector<std::string>& names) {
  bool ok = true;
  double worst = 0;
  std::string worst_name;
  for (const auto& n : names) {
    const auto& c = check(rep, n);
    ok = ok && c.passed;
    const double ratio = c.tolerance > 0 ? c.measured / c.tolerance : (c.passed ? 0 : 1e300);
    if (ratio >= worst) {
      worst = ratio;
      worst_name = n;
    }
  }
  return {ok, std::to_string(names.size()) + " checks, worst " + worst_name + " at " + num(worst, "%.2g") +
                  " of tolerance"};
}

RunOptions quiet_options() {
  RunOptions o;
  o.write_outputs = false;
  return o;
}

nlohmann::json matrix_json(const std::string& file) {
  return read_json_file((fs::path(FSF_SOURCE_DIR) / "configs" / file).string());
}

BenchReport run_matrix(nlohmann::json j, const std::string& out, const Checkpoint* teacher) {
  j["output_dir"] = (kWork / out).string();
  const auto m = bench_matrix_from_json(j);
  const auto rep = run_bench(m, teacher, [](const BenchRun& r) {
    std::cout << "    " << r.cell << " seed " << r.seed << ": "
              << (r.ok ? "sw2 " + num(r.metrics.sw2) + ", coverage " + num(r.metrics.modes.coverage, "%.3f")
                       : "FAILED " + r.error)
              << std::endl;
  });
  return rep;
}

bool all_ok(const BenchReport& rep, const std::string& cell) {
  const auto& r = rep.row(cell);
  return r.failed == 0 && r.runs > 0;
}

// Longest single run of a cell in seconds, from its steps and sec/step.
double max_run_seconds(const BenchReport& rep, const std::string& cell, int steps) {
  double worst = 0;
  for (const auto& r : rep.runs) {
    if (r.cell == cell) worst = std::max(worst, r.sec_per_step * steps);
  }
  return worst;
}

int cell_steps(const nlohmann::json& matrix, const std::string& cell) {
  nlohmann::json j = matrix.at("base");
  for (const auto& c : matrix.at("cells")) {
    if (c.at("name") == cell) apply_overrides(j, c.at("set").get<std::vector<std::string>>());
  }
  return config_from_json(j).steps;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FSFLAB_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

// Removes the named column (located through the header row) from a CSV.
std::string drop_column(const std::string& csv, const std::string& name) {
  std::istringstream in(csv);
  std::string line, out;
  std::ptrdiff_t col = -1;
  bool header = true;
  while (std::getline(in, line)) {
    auto cells = split_csv_line(line);
    if (header) {
      const auto it = std::find(cells.begin(), cells.end(), name);
      if (it != cells.end()) col = it - cells.begin();
      header = false;
    }
    if (col >= 0 && col < static_cast<std::ptrdiff_t>(cells.size())) cells.erase(cells.begin() + col);
    for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
    out += "\n";
  }
  return out;
}

bool same_run(const RunResult& a, const RunResult& b) {
  bool ok = a.checkpoint.params.bit_equal(b.checkpoint.params);
  ok = ok && a.checkpoint.ema.has_value() == b.checkpoint.ema.has_value();
  if (ok && a.checkpoint.ema) ok = a.checkpoint.ema->as_params().bit_equal(b.checkpoint.ema->as_params());
  ok = ok && a.log.csv_without_timing() == b.log.csv_without_timing();
  ok = ok && a.final_metrics && b.final_metrics &&
       to_json(*a.final_metrics).dump() == to_json(*b.final_metrics).dump();
  return ok;
}

}  // namespace

int main() {
  fs::create_directories(kWork);
  const auto start = std::chrono::steady_clock::now();

  // 1, 2 and 10 share one verify pass.
  const auto t_verify = std::chrono::steady_clock::now();
  const VerifyReport clean = run_verify();
  const double verify_seconds = seconds_since(t_verify);
  {
    auto [ok, detail] = all_pass(clean, {"score-velocity", "flow-map-round-trip", "flow-map-semigroup",
                                         "rollout-semigroup", "average-velocity"});
    ok = ok && verify_seconds < kIdentitySeconds;
    record({1, "identity suite", ok, detail + ", suite ran in " + num(verify_seconds, "%.1f") + " s"});
  }
  {
    auto [ok, detail] =
        all_pass(clean, {"grad-cfm", "grad-ct", "grad-cd", "grad-fsf-single", "grad-fsf-single-live-fake",
                         "grad-fsf-rollout", "grad-fsf-dmd2-simulation", "grad-fsf-scratch", "grad-dmd2-fake",
                         "grad-dmd2-generator", "grad-dmd2-generator-simulated", "eq18-identity"});
    ok = ok && verify_seconds < kGradientSeconds;
    record({2, "gradient suite", ok, detail + ", suite ran in " + num(verify_seconds, "%.1f") + " s"});
  }

  // 3. The exact flow map of N(2, 1) data against its own coupling-consistent
  // endpoint velocity is a stationary point.
  {
    Vector mu(1);
    mu << 2.0;
    const LinearGaussianFlow flow{mu, 1.0};
    const auto exact = fsf_stationarity(flow, analytic_endpoint_velocity(flow), 2, 0);
    record({3, "stationarity", exact.grad_max <= kStationarityGrad,
            "max |grad| " + num(exact.grad_max, "%.2e") + " (<= " + num(kStationarityGrad, "%.0e") +
                "), max |delta| " + num(exact.delta_max, "%.2e")});
    const auto marginal = fsf_stationarity(flow, analytic_velocity(g1(mu, 1.0)), 2, 0);
    info("against the marginal velocity instead: max |grad| " + num(marginal.grad_max, "%.3e") + ", max |delta| " +
         num(marginal.delta_max, "%.3e"));
  }

  const auto distill_matrix = matrix_json("distill_gm8.json");

  // 4. Teacher, trained with the distillation matrix's teacher settings.
  Checkpoint teacher;
  double teacher_sw2 = 0;
  {
    nlohmann::json j = distill_matrix.at("base");
    std::vector<std::string> o{"method=teacher-cfm"};
    for (const auto& s : distill_matrix.at("teacher_overrides")) o.push_back(s.get<std::string>());
    apply_overrides(j, o);
    j["output_dir"] = (kWork / "teacher").string();
    const auto cfg = config_from_json(j);
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = train_teacher(cfg);
    const double secs = seconds_since(t0);
    teacher = res.checkpoint;
    const auto& m = *res.final_metrics;
    teacher_sw2 = m.sw2;
    const bool ok = m.sw2 <= kTeacherSw2 && m.modes.coverage == 1.0 && secs < kTeacherSeconds &&
                    cfg.steps == 20000 && cfg.batch_size == 128 && cfg.eval.samples == 8192 &&
                    cfg.eval.teacher_steps == 64;
    record({4, "teacher quality", ok,
            "sliced-W2 " + num(m.sw2) + " (<= " + num(kTeacherSw2, "%.2f") + "), coverage " +
                num(m.modes.coverage, "%.3f") + ", " + num(secs, "%.0f") + " s"});
    auto unmatched = cfg;
    unmatched.eval.class_conditional = false;
    info("against an independently labelled reference: sliced-W2 " +
         num(evaluate_checkpoint(teacher, unmatched).sw2));
  }

  // 5 and 7.
  {
    const auto rep = run_matrix(distill_matrix, "distill_gm8", &teacher);
    write_text_file((kWork / "distill_gm8.md").string(), rep.markdown());
    const auto& cd = rep.row("cd");
    const auto& fsf = rep.row("fsf-flowmap-m2");
    const double budget = std::max(max_run_seconds(rep, "cd", cell_steps(distill_matrix, "cd")),
                                   max_run_seconds(rep, "fsf-flowmap-m2", cell_steps(distill_matrix, "fsf-flowmap-m2")));
    const bool ok = all_ok(rep, "init-cd") && all_ok(rep, "cd") && all_ok(rep, "fsf-flowmap-m2") &&
                    fsf.sw2_mean < cd.sw2_mean && fsf.coverage_min == 1.0 && cd.coverage_min == 1.0 &&
                    budget <= kRunBudgetSeconds;
    record({5, "FSF-DMD beats CD from a flow-map init", ok,
            "sliced-W2 " + num(fsf.sw2_mean) + " +- " + num(fsf.sw2_sd) + " vs " + num(cd.sw2_mean) + " +- " +
                num(cd.sw2_sd) + " over " + std::to_string(fsf.runs) + " seeds, min coverage " +
                num(std::min(fsf.coverage_min, cd.coverage_min), "%.3f") + ", longest run " + num(budget, "%.0f") +
                " s"});

    const auto& sim = rep.row("fsf-dmd2sim-n2");
    const auto& none = rep.row("fsf-nosim");
    const bool ran = all_ok(rep, "fsf-dmd2sim-n2") && all_ok(rep, "fsf-nosim") && all_ok(rep, "fsf-flowmap-m2");
    const bool ordered = fsf.sw2_mean <= sim.sw2_mean && sim.sw2_mean <= none.sw2_mean;
    record({7, "simulation ablation ordering", ran && ordered,
            "flow-map " + num(fsf.sw2_mean) + " <= DMD2-style " + num(sim.sw2_mean) + " <= none " +
                num(none.sw2_mean) + (ordered ? "" : " does not hold (reported deviation)"),
            ran});
    info("M=1 vs M=2 gap (single-step rollout is the no-simulation cell): " + num(none.sw2_mean - fsf.sw2_mean) +
         " sliced-W2, " + num(100 * (none.sw2_mean / fsf.sw2_mean - 1), "%.0f") + "% relative");
  }

  // Converged-budget comparison, reported only.
  {
    nlohmann::json j = distill_matrix;
    j["cells"] = nlohmann::json::array(
        {{{"name", "init-cd-5k"}, {"set", {"method=cd", "steps=5000"}}},
         {{"name", "cd-5k"}, {"set", {"method=cd", "steps=5000"}}, {"init_from", "init-cd-5k"}},
         {{"name", "fsf-5k"}, {"set", {"method=fsf-dmd", "steps=5000"}}, {"init_from", "init-cd-5k"}}});
    const auto rep = run_matrix(j, "distill_gm8_long", &teacher);
    write_text_file((kWork / "distill_gm8_long.md").string(), rep.markdown());
    info("5k+5k budget: FSF-DMD " + num(rep.row("fsf-5k").sw2_mean) + " vs CD " + num(rep.row("cd-5k").sw2_mean) +
         " sliced-W2 (teacher " + num(teacher_sw2) + ")");
  }

  // 6.
  {
    const auto matrix = matrix_json("scratch_gm8.json");
    const auto rep = run_matrix(matrix, "scratch_gm8", nullptr);
    write_text_file((kWork / "scratch_gm8.md").string(), rep.markdown());
    const auto& ct = rep.row("ct");
    const auto& fsf = rep.row("fsf-scratch");
    const int steps_ct = cell_steps(matrix, "ct");
    const int steps_fsf = cell_steps(matrix, "fsf-scratch");
    const bool ok = all_ok(rep, "ct") && all_ok(rep, "fsf-scratch") && fsf.sw2_mean < ct.sw2_mean &&
                    steps_ct == steps_fsf && steps_ct == 20000;
    std::string per_seed;
    for (const auto& r : rep.runs) {
      if (r.cell == "fsf-scratch") per_seed += " " + num(r.metrics.sw2);
    }
    record({6, "from-scratch FSF beats CT", ok,
            "sliced-W2 " + num(fsf.sw2_mean) + " +- " + num(fsf.sw2_sd) + " vs " + num(ct.sw2_mean) + " +- " +
                num(ct.sw2_sd) + " at " + std::to_string(steps_fsf) + " steps, " + std::to_string(fsf.runs) +
                " seeds"});
    std::string ct_seeds;
    for (const auto& r : rep.runs) {
      if (r.cell == "ct") ct_seeds += " " + num(r.metrics.sw2);
    }
    info("per seed, fsf-scratch:" + per_seed + "; ct:" + ct_seeds);
  }

  // 8. Identical nets and batch; only the objective differs.
  {
    nlohmann::json j = distill_matrix.at("base");
    apply_overrides(j, {"steps=" + std::to_string(kCostSteps), "dmd2.ttur_ratio=5"});
    auto fsf_cfg = j;
    auto dmd2_cfg = j;
    apply_override(fsf_cfg, "method=fsf-dmd");
    apply_override(dmd2_cfg, "method=dmd2");
    RunOptions o = quiet_options();
    o.evaluate_final = false;
    const auto fsf = distill(config_from_json(fsf_cfg), teacher, nullptr, o);
    const auto dmd2 = distill(config_from_json(dmd2_cfg), teacher, nullptr, o);
    const double ratio = static_cast<double>(dmd2.registry.total()) / static_cast<double>(fsf.registry.total());
    record({8, "cost versus DMD2", fsf.mean_sec_per_step < dmd2.mean_sec_per_step && ratio >= kParamRatio,
            num(fsf.mean_sec_per_step, "%.4f") + " vs " + num(dmd2.mean_sec_per_step, "%.4f") +
                " s/step, trainable parameters " + std::to_string(dmd2.registry.total()) + ":" +
                std::to_string(fsf.registry.total()) + " = " + num(ratio, "%.2f")});
  }

  // 9. Library-level reruns of every method, then CLI-level reruns.
  {
    bool ok = true;
    std::string failed;
    const auto base = distill_matrix.at("base");
    for (const std::string m : {"teacher-cfm", "ct", "fsf-scratch", "cd", "fsf-dmd", "dmd2"}) {
      nlohmann::json j = base;
      apply_overrides(j, {"method=" + m, "steps=60", "log_every=20", "eval.samples=2048", "seed=5"});
      const auto cfg = config_from_json(j);
      const auto a = run_experiment(cfg, &teacher, nullptr, quiet_options());
      const auto b = run_experiment(cfg, &teacher, nullptr, quiet_options());
      if (!same_run(a, b)) {
        ok = false;
        failed += " " + m;
      }
    }
    const fs::path d = kWork / "determinism";
    fs::remove_all(d);
    const std::string cfg_path = (d / "ct.json").string();
    write_text_file(cfg_path, R"({"method": "ct", "steps": 60, "log_every": 20, "eval": {"samples": 2048}})");
    int rc = 0;
    for (const char* run : {"a", "b"}) {
      rc |= run_cli("train-scratch --quiet --config " + cfg_path + " --seed 3 --out " + (d / run).string());
      rc |= run_cli("sample --ckpt " + (d / run / "model.ckpt").string() + " --n 500 --seed 4 --out " +
                    (d / run / "samples").string());
      rc |= run_cli("eval --ckpt " + (d / run / "model.ckpt").string() + " --out " + (d / run / "eval.json").string());
    }
    const bool cli_same =
        rc == 0 && load_checkpoint(d / "a" / "model.ckpt").params.bit_equal(load_checkpoint(d / "b" / "model.ckpt").params) &&
        drop_column(file_bytes(d / "a" / "log.csv"), "sec_per_step") ==
            drop_column(file_bytes(d / "b" / "log.csv"), "sec_per_step") &&
        file_bytes(d / "a" / "metrics.json") == file_bytes(d / "b" / "metrics.json") &&
        file_bytes(d / "a" / "samples" / "samples.csv") == file_bytes(d / "b" / "samples" / "samples.csv") &&
        file_bytes(d / "a" / "eval.json") == file_bytes(d / "b" / "eval.json");
    if (!cli_same) failed += " cli";
    record({9, "determinism", ok && cli_same,
            ok && cli_same ? "6 methods rerun bit-identically (parameters, EMA, untimed log, metrics); CLI "
                             "train-scratch, sample and eval outputs identical"
                           : "differences in:" + failed});
  }

  // 10.
  {
    const int clean_rc = run_cli("verify");
    std::string detail = "clean exit " + std::to_string(clean_rc);
    bool ok = clean_rc == 0 && clean.passed();
    for (const auto& name : canary_names()) {
      const int rc = run_cli("verify --canary " + name);
      std::string caught;
      for (const auto& c : run_verify(canary_hooks(name)).checks) {
        if (!c.passed) caught += (caught.empty() ? "" : "/") + c.name;
      }
      detail += ", " + name + " exit " + std::to_string(rc) + " (" + caught + ")";
      ok = ok && rc != 0 && !caught.empty();
    }
    record({10, "verify and mutation canaries", ok, detail});
  }

  int hard_failures = 0, passed = 0;
  std::string md = "| criterion | status | detail |\n|---|---|---|\n";
  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
  for (const auto& v : verdicts) {
    passed += v.pass;
    hard_failures += !v.pass && !v.soft;
    md += "| " + std::to_string(v.id) + " " + v.title + " | " + (v.pass ? "PASS" : v.soft ? "SOFT" : "FAIL") + " | " +
          v.detail + " |\n";
  }
  write_text_file((kWork / "summary.md").string(), md);
  std::cout << "acceptance: " << passed << "/" << verdicts.size() << " criteria passed, " << hard_failures
            << " hard failures, " << num(seconds_since(start), "%.0f") << " s" << std::endl;
  return hard_failures == 0 ? 0 : 1;
}
