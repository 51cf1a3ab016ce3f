#include "xgram/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <map>

#include <nlohmann/json.hpp>

#include "xgram/error.hpp"
#include "xgram/io.hpp"

namespace xgram::pipeline {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string key_of(const std::string& text) { return io::hex64(io::fnv1a64(text)); }

// Write-then-rename so an interrupted stage never leaves a file that looks complete.
void publish(const fs::path& path, std::span<const std::uint8_t> bytes) {
  const fs::path tmp = path.string() + ".tmp";
  io::write_file(tmp, bytes);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

void publish(const fs::path& path, const std::string& text) {
  publish(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

bool all_exist(std::initializer_list<fs::path> paths) {
  for (const auto& p : paths)
    if (!fs::exists(p)) return false;
  return true;
}

// Re-raises the active error with the stage name in front, keeping its type.
[[noreturn]] void rethrow_in_stage(const std::string& stage) {
  const auto msg = [&](const std::exception& e) { return "stage '" + stage + "' failed: " + e.what(); };
  try {
    throw;
  } catch (const NumericError& e) {
    throw NumericError(msg(e));
  } catch (const VersionError& e) {
    throw VersionError(msg(e));
  } catch (const FormatError& e) {
    throw FormatError(msg(e));
  } catch (const IoError& e) {
    throw IoError(msg(e));
  } catch (const ValidationError& e) {
    throw ValidationError(msg(e));
  } catch (const std::exception& e) {
    throw Error(msg(e));
  }
}

std::size_t gate_warmup(const config::RunConfig& cfg) {
  return static_cast<std::size_t>(
      std::llround(cfg.optimizer.warmup_fraction * static_cast<double>(cfg.train.steps)));
}

}  // namespace

PipelineResult run_pipeline(const config::RunConfig& cfg, const fs::path& out_dir,
                            const PipelineOptions& opts) {
  cfg.validate();
  const auto log = [&](const std::string& s) {
    if (opts.log) opts.log(s);
  };
  fs::create_directories(out_dir);
  PipelineResult res;
  auto& art = res.artifacts;
  std::unique_ptr<data::Source> source;

  // stats
  StageResult st{"stats", "", false};
  try {
    source = config::make_source(cfg.data, cfg.backbone.vocab_size);
    std::string input = "stats/1|" + config::data_to_json(cfg.data, cfg.backbone.vocab_size, cfg.stats_tokens) +
                        "|" + std::to_string(cfg.backbone.seq_len);
    if (cfg.data.source == "ids") input += "|" + io::hex64(io::fnv1a64(io::read_file(cfg.data.path)));
    st.key = key_of(input);
    art.stats = out_dir / ("stats-" + st.key + ".json");
    st.cached = all_exist({art.stats});
    if (!st.cached) {
      const auto tokens = data::sample_tokens(*source, cfg.stats_tokens, cfg.backbone.seq_len);
      publish(art.stats, stats::frequency_to_json(stats::count_tokens(tokens, cfg.backbone.vocab_size)));
    }
  } catch (...) {
    rethrow_in_stage("stats");
  }
  const std::string& stats_key = st.key;
  log(std::string("stats: ") + (st.cached ? "cached " : "computed ") + stats_key);
  res.stages.push_back(st);

  // plan
  const std::string plan_key = key_of("plan/1|" + stats_key + "|" + config::routing_to_json(cfg.routing));
  art.plan = out_dir / ("plan-" + plan_key + ".xg");
  StageResult pl{"plan", plan_key, all_exist({art.plan})};
  std::shared_ptr<const routing::RoutingPlan> plan;
  try {
    if (!pl.cached) {
      const auto freq = stats::frequency_from_json(io::read_text(art.stats));
      publish(art.plan, routing::serialize_plan(routing::build_plan(freq, cfg.routing)));
    }
    plan = std::make_shared<const routing::RoutingPlan>(
        routing::deserialize_plan(io::read_file(art.plan)));
  } catch (...) {
    rethrow_in_stage("plan");
  }
  log(std::string("plan: ") + (pl.cached ? "cached " : "computed ") + plan_key);
  res.stages.push_back(pl);

  // train
  const std::string cfg_json = config::to_json(cfg);
  const std::string train_key = key_of("train/1|" + plan_key + "|" + cfg_json);
  art.checkpoint = out_dir / ("ckpt-" + train_key + ".xg");
  art.trace = out_dir / ("trace-" + train_key + ".csv");
  art.hits = out_dir / ("hits-" + train_key + ".bin");
  art.access = out_dir / ("access-" + train_key + ".bin");
  const fs::path result_path = out_dir / ("result-" + train_key + ".json");
  StageResult tr{"train", train_key,
                 all_exist({art.checkpoint, art.trace, art.hits, art.access, result_path})};
  try {
    if (!tr.cached) {
      model::Model m(cfg.backbone, cfg.injection, plan, cfg.train.seed, gate_warmup(cfg));
      const auto out = train::train(m, *source, cfg.train, cfg.optimizer);
      publish(art.trace, train::trace_csv(out.trace, cfg.backbone.layers));
      publish(art.hits, train::serialize_hits(train::collect_hits(m)));
      publish(art.access, train::serialize_access(out.last_batch_access));
      publish(art.checkpoint, m.save(cfg_json).serialize());
      publish(result_path, json{{"final_val_loss", out.final_val_loss}}.dump() + "\n");
    }
    res.final_val_loss = json::parse(io::read_text(result_path)).at("final_val_loss").get<double>();
  } catch (...) {
    rethrow_in_stage("train");
  }
  log(std::string("train: ") + (tr.cached ? "cached " : "computed ") + train_key);
  res.stages.push_back(tr);

  if (opts.diagnose) {
    art.report = out_dir / ("report-" + train_key + ".json");
    StageResult dg{"diagnose", train_key, all_exist({art.report})};
    try {
      if (!dg.cached) {
        auto loaded = load_checkpoint(art.checkpoint, art.plan);
        const auto hits = train::deserialize_hits(io::read_file(art.hits));
        const auto rep = analysis::diagnose(*loaded.model, *source, hits,
                                            {cfg.diagnose_batches, cfg.train.batch});
        publish(art.report, analysis::report_json(rep));
      }
    } catch (...) {
      rethrow_in_stage("diagnose");
    }
    log(std::string("diagnose: ") + (dg.cached ? "cached " : "computed ") + train_key);
    res.stages.push_back(dg);
  }

  json manifest;
  manifest["version"] = 1;
  manifest["final_val_loss"] = res.final_val_loss;
  for (const auto& s : res.stages) manifest["stages"].push_back({{"name", s.name}, {"key", s.key}, {"cached", s.cached}});
  manifest["artifacts"] = {{"stats", art.stats.filename().string()},
                           {"plan", art.plan.filename().string()},
                           {"checkpoint", art.checkpoint.filename().string()},
                           {"trace", art.trace.filename().string()},
                           {"hits", art.hits.filename().string()},
                           {"access", art.access.filename().string()},
                           {"report", art.report.filename().string()}};
  publish(out_dir / ("manifest-" + train_key + ".json"), manifest.dump(2) + "\n");
  return res;
}

LoadedRun load_checkpoint(const fs::path& checkpoint, const fs::path& plan_path) {
  const auto archive = checkpoint::Archive::deserialize(io::read_file(checkpoint));
  LoadedRun run;
  run.config = config::from_json(archive.meta);
  run.plan = std::make_shared<const routing::RoutingPlan>(
      routing::deserialize_plan(io::read_file(plan_path)));
  if (run.plan->config != run.config.routing || run.plan->vocab_size != run.config.backbone.vocab_size)
    throw ValidationError("plan " + plan_path.string() + " was not built for checkpoint " +
                          checkpoint.string());
  run.model = std::make_unique<model::Model>(run.config.backbone, run.config.injection, run.plan,
                                             run.config.train.seed, gate_warmup(run.config));
  run.model->load(archive);
  return run;
}

config::RunConfig make_variant(const config::RunConfig& base, const std::string& variant) {
  config::RunConfig c = base;
  std::string preset;
  if (variant == "baseline") {
    preset = "none";
  } else if (variant == "ple") {
    preset = "ple";
    c.routing.rho = 1.0;
  } else if (variant.rfind("xgram-", 0) == 0) {
    preset = variant.substr(6);
    if (preset != "1x" && preset != "2x" && preset != "4x")
      throw ValidationError("unknown variant '" + variant + "'");
  } else {
    throw ValidationError("unknown variant '" + variant + "' (baseline, ple, xgram-1x, xgram-2x, xgram-4x)");
  }
  c.name = base.name + "-" + variant;
  c.injection_preset = preset;
  c.injection = config::expand_injection(preset, c.backbone.layers, c.lambda_init);
  c.validate();
  return c;
}

std::vector<CompareRow> compare(const config::RunConfig& base, const std::vector<std::string>& variants,
                                const std::vector<std::uint64_t>& seeds, const fs::path& out_dir,
                                const PipelineOptions& opts) {
  if (variants.empty() || seeds.empty()) throw ValidationError("compare needs variants and seeds");
  std::vector<CompareRow> rows;
  PipelineOptions inner = opts;
  inner.diagnose = false;
  for (const auto& v : variants) {
    const auto cfg = make_variant(base, v);
    for (const auto seed : seeds) {
      auto c = cfg;
      c.train.seed = seed;
      if (opts.log) opts.log("== " + v + " seed " + std::to_string(seed));
      const auto r = run_pipeline(c, out_dir, inner);
      rows.push_back({v, seed, r.final_val_loss, r.artifacts});
    }
  }
  return rows;
}

std::string compare_table(const std::vector<CompareRow>& rows) {
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;
  std::map<std::pair<std::string, std::uint64_t>, double> loss;
  for (const auto& r : rows) {
    if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) variants.push_back(r.variant);
    if (std::find(seeds.begin(), seeds.end(), r.seed) == seeds.end()) seeds.push_back(r.seed);
    loss[{r.variant, r.seed}] = r.final_val_loss;
  }
  char buf[64];
  std::string out = "variant     ";
  for (const auto s : seeds) {
    std::snprintf(buf, sizeof buf, "  seed=%-6llu", static_cast<unsigned long long>(s));
    out += buf;
  }
  out += "      mean\n";
  for (const auto& v : variants) {
    std::snprintf(buf, sizeof buf, "%-12s", v.c_str());
    out += buf;
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto s : seeds) {
      const auto it = loss.find({v, s});
      if (it == loss.end()) {
        out += "            ";
        continue;
      }
      std::snprintf(buf, sizeof buf, "  %10.6f", it->second);
      out += buf;
      sum += it->second;
      ++n;
    }
    std::snprintf(buf, sizeof buf, "  %10.6f\n", n ? sum / static_cast<double>(n) : 0.0);
    out += buf;
  }
  return out;
}

std::string compare_json(const std::vector<CompareRow>& rows) {
  json j;
  j["version"] = 1;
  j["runs"] = json::array();
  for (const auto& r : rows)
    j["runs"].push_back({{"variant", r.variant},
                         {"seed", r.seed},
                         {"final_val_loss", r.final_val_loss},
                         {"checkpoint", r.artifacts.checkpoint.filename().string()},
                         {"trace", r.artifacts.trace.filename().string()},
                         {"plan", r.artifacts.plan.filename().string()}});
  return j.dump(2) + "\n";
}

std::string budget_json(const config::RunConfig& cfg) {
  cfg.validate();
  const auto& b = cfg.backbone;
  const std::uint64_t paths = cfg.routing.rho < 1.0 ? cfg.routing.hash_paths : 1;
  json views = json::array();
  std::uint64_t params = 0, dims = 0, flops = 0;
  for (std::size_t l = 0; l < cfg.injection.layers.size(); ++l)
    for (std::size_t m = 0; m < cfg.injection.layers[l].size(); ++m) {
      const auto& v = cfg.injection.layers[l][m];
      if (!v.enabled) continue;
      const std::uint64_t k = v.extract ? v.kernel_size : 0;
      const auto s = analysis::site_budget(v.site, b.vocab_size, b.width, b.kv_width(),
                                           cfg.routing.rho, paths, k);
      views.push_back({{"layer", l},
                       {"view", m},
                       {"site", injection::site_name(v.site)},
                       {"kernel", k},
                       {"kappa", analysis::kappa(paths, k)},
                       {"params", s.params},
                       {"dims", s.dims},
                       {"flops", s.flops}});
      params += s.params;
      dims += s.dims;
      flops += s.flops;
    }
  json table = json::array();
  for (const auto& r : analysis::budget_table(b.vocab_size, b.width, b.kv_width(), cfg.routing.rho, paths, 3))
    table.push_back({{"site", r.label}, {"params", r.budget.params}, {"dims", r.budget.dims}, {"flops", r.budget.flops}});
  json j;
  j["version"] = 1;
  j["vocab_size"] = b.vocab_size;
  j["width"] = b.width;
  j["kv_width"] = b.kv_width();
  j["rho"] = cfg.routing.rho;
  j["paths"] = paths;
  j["views"] = views;
  j["totals"] = {{"params", params}, {"dims", dims}, {"flops", flops}};
  j["reference"] = {{"kernel", 3}, {"kappa", analysis::kappa(paths, 3)}, {"rows", table}};
  return j.dump(2) + "\n";
}

}  // namespace xgram::pipeline
