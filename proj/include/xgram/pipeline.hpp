#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "xgram/analysis.hpp"
#include "xgram/config.hpp"

namespace xgram::pipeline {

struct StageResult {
  std::string name;  // stats, plan, train, diagnose
  std::string key;   // content hash of the stage inputs
  bool cached = false;
};

struct Artifacts {
  std::filesystem::path stats, plan, checkpoint, trace, hits, access, report;
};

struct PipelineOptions {
  bool diagnose = true;
  std::function<void(const std::string&)> log;
};

struct PipelineResult {
  std::vector<StageResult> stages;
  Artifacts artifacts;
  double final_val_loss = 0.0;
};

// stats -> plan -> train -> diagnose. Each stage's artifacts are named by the
// hash of everything upstream of it, so a stage reruns only when its inputs
// change. A failing stage raises the original error type prefixed with the
// stage name; artifacts already written stay on disk.
PipelineResult run_pipeline(const config::RunConfig& cfg, const std::filesystem::path& out_dir,
                            const PipelineOptions& opts = {});

// Builds the model described by a checkpoint's embedded config and loads it.
struct LoadedRun {
  config::RunConfig config;
  std::shared_ptr<const routing::RoutingPlan> plan;
  std::unique_ptr<model::Model> model;
};
LoadedRun load_checkpoint(const std::filesystem::path& checkpoint, const std::filesystem::path& plan);

// Variants: baseline (no views), ple (two raw inter-layer views, rho = 1),
// xgram-1x / xgram-2x / xgram-4x (preset views, routing rho from the config).
config::RunConfig make_variant(const config::RunConfig& base, const std::string& variant);

struct CompareRow {
  std::string variant;
  std::uint64_t seed = 0;
  double final_val_loss = 0.0;
  Artifacts artifacts;
};

std::vector<CompareRow> compare(const config::RunConfig& base, const std::vector<std::string>& variants,
                                const std::vector<std::uint64_t>& seeds,
                                const std::filesystem::path& out_dir, const PipelineOptions& opts = {});

// Fixed-width text table: one row per variant, one column per seed, plus the mean.
std::string compare_table(const std::vector<CompareRow>& rows);
std::string compare_json(const std::vector<CompareRow>& rows);

// Per-view budget of a run config plus the per-site reference table, as JSON.
std::string budget_json(const config::RunConfig& cfg);

}  // namespace xgram::pipeline
