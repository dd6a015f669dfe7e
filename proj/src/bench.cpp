#include "fsf/bench.hpp"

#include "fsf/artifacts.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>

namespace fsf {

using nlohmann::json;

namespace {

bool needs_teacher(Method m) { return m == Method::Cd || m == Method::FsfDmd || m == Method::Dmd2; }

ExperimentConfig cell_config(const BenchMatrix& matrix, const BenchCell& cell, std::uint64_t seed) {
  json j = matrix.base;
  apply_overrides(j, cell.overrides);
  j["seed"] = seed;
  j["output_dir"] = (std::filesystem::path(matrix.output_dir) / cell.name / ("seed-" + std::to_string(seed))).string();
  return config_from_json(j);
}

std::pair<double, double> mean_sd(const std::vector<double>& v) {
  if (v.empty()) return {std::nan(""), std::nan("")};
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return {m, sd};
}

std::string fmt(double v, const char* spec = "%.5f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

}  // namespace

void BenchMatrix::validate() const {
  if (cells.size() < 2) throw ConfigError("bench matrix needs at least two cells");
  if (seeds.empty()) throw ConfigError("bench matrix needs at least one seed");
  std::set<std::string> names;
  for (const auto& c : cells) {
    if (c.name.empty()) throw ConfigError("bench cell without a name");
    if (!c.init_from.empty() && !names.count(c.init_from)) {
      throw ConfigError("bench cell '" + c.name + "': init_from must name an earlier cell");
    }
    if (!names.insert(c.name).second) throw ConfigError("duplicate bench cell '" + c.name + "'");
  }
}

BenchMatrix bench_matrix_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("bench matrix must be a JSON object");
  static const std::set<std::string> known{"base", "cells", "seeds", "output_dir", "teacher", "teacher_overrides"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown bench matrix key '" + key + "'");
  }
  BenchMatrix m;
  try {
    if (j.contains("base")) m.base = j.at("base");
    if (j.contains("seeds")) m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("output_dir")) m.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("teacher")) m.teacher_path = j.at("teacher").get<std::string>();
    if (j.contains("teacher_overrides")) m.teacher_overrides = j.at("teacher_overrides").get<std::vector<std::string>>();
    for (const auto& c : j.at("cells")) {
      BenchCell cell;
      cell.name = c.at("name").get<std::string>();
      if (c.contains("set")) cell.overrides = c.at("set").get<std::vector<std::string>>();
      if (c.contains("init_from")) cell.init_from = c.at("init_from").get<std::string>();
      m.cells.push_back(std::move(cell));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bench matrix: ") + e.what());
  }
  m.validate();
  // Reject bad cells before any run starts.
  for (const auto& c : m.cells) cell_config(m, c, m.seeds.front());
  return m;
}

BenchMatrix load_bench_matrix(const std::string& path) { return bench_matrix_from_json(read_json_file(path)); }

BenchReport aggregate(std::vector<BenchRun> runs, const std::vector<BenchCell>& order) {
  BenchReport rep;
  for (const auto& cell : order) {
    BenchRow row;
    row.cell = cell.name;
    std::vector<double> sw2, cov, mmd, energy, sec;
    for (const auto& r : runs) {
      if (r.cell != cell.name) continue;
      row.method = r.method;
      ++row.runs;
      if (!r.ok) {
        ++row.failed;
        continue;
      }
      sw2.push_back(r.metrics.sw2);
      cov.push_back(r.metrics.modes.coverage);
      mmd.push_back(r.metrics.mmd);
      energy.push_back(r.metrics.energy);
      sec.push_back(r.sec_per_step);
      row.trainable_params = r.trainable_params;
    }
    std::tie(row.sw2_mean, row.sw2_sd) = mean_sd(sw2);
    std::tie(row.sec_mean, row.sec_sd) = mean_sd(sec);
    row.coverage_mean = mean_sd(cov).first;
    row.coverage_min = cov.empty() ? std::nan("") : *std::min_element(cov.begin(), cov.end());
    row.mmd_mean = mean_sd(mmd).first;
    row.energy_mean = mean_sd(energy).first;
    rep.rows.push_back(row);
  }
  rep.runs = std::move(runs);
  return rep;
}

const BenchRow& BenchReport::row(const std::string& cell) const {
  for (const auto& r : rows) {
    if (r.cell == cell) return r;
  }
  throw std::out_of_range("no bench row '" + cell + "'");
}

std::string BenchReport::runs_csv(bool with_timing) const {
  std::string out = "cell,method,seed,status,sw2,mmd,energy,coverage,trainable_params,updates";
  out += with_timing ? ",sec_per_step\n" : "\n";
  for (const auto& r : runs) {
    out += r.cell + "," + r.method + "," + std::to_string(r.seed) + "," + (r.ok ? "ok" : "failed") + ",";
    if (r.ok) {
      out += format_double(r.metrics.sw2) + "," + format_double(r.metrics.mmd) + "," +
             format_double(r.metrics.energy) + "," + format_double(r.metrics.modes.coverage);
    } else {
      out += ",,,";
    }
    out += "," + std::to_string(r.trainable_params) + "," + std::to_string(r.updates);
    out += with_timing ? "," + format_double(r.sec_per_step) + "\n" : "\n";
  }
  return out;
}

std::string BenchReport::summary_csv(bool with_timing) const {
  std::string out = "cell,method,runs,failed,sw2_mean,sw2_sd,coverage_mean,coverage_min,mmd_mean,energy_mean,"
                    "trainable_params";
  out += with_timing ? ",sec_per_step_mean,sec_per_step_sd\n" : "\n";
  for (const auto& r : rows) {
    out += r.cell + "," + r.method + "," + std::to_string(r.runs) + "," + std::to_string(r.failed) + "," +
           format_double(r.sw2_mean) + "," + format_double(r.sw2_sd) + "," + format_double(r.coverage_mean) + "," +
           format_double(r.coverage_min) + "," + format_double(r.mmd_mean) + "," + format_double(r.energy_mean) + "," +
           std::to_string(r.trainable_params);
    out += with_timing ? "," + format_double(r.sec_mean) + "," + format_double(r.sec_sd) + "\n" : "\n";
  }
  return out;
}

std::string BenchReport::markdown() const {
  std::string out =
      "| cell | method | runs | sliced-W2 (mean ± sd) | coverage (min) | MMD | energy | sec/step | params |\n"
      "|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    const std::string runs = std::to_string(r.runs - r.failed) + "/" + std::to_string(r.runs);
    out += "| " + r.cell + " | " + r.method + " | " + runs + " | " + fmt(r.sw2_mean) + " ± " + fmt(r.sw2_sd) + " | " +
           fmt(r.coverage_min, "%.3f") + " | " + fmt(r.mmd_mean, "%.2e") + " | " + fmt(r.energy_mean, "%.2e") + " | " +
           fmt(r.sec_mean, "%.4f") + " ± " + fmt(r.sec_sd, "%.4f") + " | " + std::to_string(r.trainable_params) +
           " |\n";
  }
  return out;
}

BenchReport run_bench(const BenchMatrix& matrix, const Checkpoint* teacher, const BenchProgress& progress) {
  matrix.validate();
  std::optional<Checkpoint> owned;
  auto get_teacher = [&]() -> const Checkpoint& {
    if (teacher) return *teacher;
    if (!owned) {
      if (!matrix.teacher_path.empty()) {
        owned = load_checkpoint(matrix.teacher_path);
      } else {
        json j = matrix.base;
        std::vector<std::string> o{"method=teacher-cfm"};
        o.insert(o.end(), matrix.teacher_overrides.begin(), matrix.teacher_overrides.end());
        apply_overrides(j, o);
        j["output_dir"] = (std::filesystem::path(matrix.output_dir) / "teacher").string();
        owned = train_teacher(config_from_json(j)).checkpoint;
      }
    }
    return *owned;
  };

  std::vector<BenchRun> runs;
  std::map<std::pair<std::string, std::uint64_t>, Checkpoint> results;
  for (const auto& cell : matrix.cells) {
    for (const auto seed : matrix.seeds) {
      BenchRun r;
      r.cell = cell.name;
      r.seed = seed;
      try {
        const ExperimentConfig cfg = cell_config(matrix, cell, seed);
        r.method = to_string(cfg.method);
        const Checkpoint* t = needs_teacher(cfg.method) ? &get_teacher() : nullptr;
        const Checkpoint* init = nullptr;
        if (!cell.init_from.empty()) {
          const auto it = results.find({cell.init_from, seed});
          if (it == results.end()) throw std::runtime_error("init cell '" + cell.init_from + "' has no result");
          init = &it->second;
        }
        const RunResult res = run_experiment(cfg, t, init);
        if (!res.final_metrics) throw std::runtime_error("run produced no final metrics");
        r.metrics = *res.final_metrics;
        r.sec_per_step = res.mean_sec_per_step;
        r.trainable_params = res.registry.total();
        r.updates = res.updates;
        r.ok = true;
        results.emplace(std::make_pair(cell.name, seed), res.checkpoint);
      } catch (const std::exception& e) {
        r.error = e.what();
      }
      if (progress) progress(r);
      runs.push_back(std::move(r));
    }
  }
  BenchReport rep = aggregate(std::move(runs), matrix.cells);
  const std::filesystem::path dir(matrix.output_dir);
  write_text_file((dir / "bench_runs.csv").string(), rep.runs_csv());
  write_text_file((dir / "bench_summary.csv").string(), rep.summary_csv());
  write_text_file((dir / "bench.md").string(), rep.markdown());
  return rep;
}

}  // namespace fsf
