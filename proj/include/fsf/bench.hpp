#pragma once
// Config-matrix sweeps: every cell runs over a shared seed list and is
// aggregated into one comparison table.

#include "fsf/trainer.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace fsf {

struct BenchCell {
  std::string name;
  std::vector<std::string> overrides;  // dotted key=value, applied to the base config
  std::string init_from;               // earlier cell whose same-seed result initializes this one
};

/// Matrix file layout:
///   {"base": {...config...}, "seeds": [0, 1, 2], "output_dir": "...",
///    "teacher": "path.ckpt" | "teacher_overrides": ["steps=20000", ...],
///    "cells": [{"name": "...", "set": ["method=cd", ...], "init_from": "..."}, ...]}
struct BenchMatrix {
  nlohmann::json base = nlohmann::json::object();
  std::vector<BenchCell> cells;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string output_dir = "runs/bench";
  std::string teacher_path;
  std::vector<std::string> teacher_overrides;

  void validate() const;
};

BenchMatrix bench_matrix_from_json(const nlohmann::json& j);
BenchMatrix load_bench_matrix(const std::string& path);

struct BenchRun {
  std::string cell;
  std::string method;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  MetricReport metrics;
  double sec_per_step = 0;
  std::size_t trainable_params = 0;
  std::uint64_t updates = 0;
};

struct BenchRow {
  std::string cell;
  std::string method;
  int runs = 0;
  int failed = 0;
  double sw2_mean = 0, sw2_sd = 0;
  double coverage_mean = 0, coverage_min = 0;
  double mmd_mean = 0, energy_mean = 0;
  double sec_mean = 0, sec_sd = 0;
  std::size_t trainable_params = 0;
};

struct BenchReport {
  std::vector<BenchRun> runs;
  std::vector<BenchRow> rows;

  const BenchRow& row(const std::string& cell) const;
  /// One line per run.
  std::string runs_csv(bool with_timing = true) const;
  /// One line per cell.
  std::string summary_csv(bool with_timing = true) const;
  std::string markdown() const;
};

BenchReport aggregate(std::vector<BenchRun> runs, const std::vector<BenchCell>& order);

using BenchProgress = std::function<void(const BenchRun&)>;

/// Runs every (cell, seed). Distillation cells use `teacher` when given,
/// else the matrix teacher path, else a teacher trained once from
/// base + teacher_overrides. A failing run is recorded, not rethrown.
BenchReport run_bench(const BenchMatrix& matrix, const Checkpoint* teacher = nullptr,
                      const BenchProgress& progress = {});

}  // namespace fsf
