#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "xgram/analysis.hpp"
#include "xgram/config.hpp"
#include "xgram/error.hpp"
#include "xgram/io.hpp"
#include "xgram/pipeline.hpp"

namespace {

using namespace xgram;
namespace fs = std::filesystem;

enum Exit { kOk = 0, kFailure = 1, kValidation = 2, kNumeric = 3, kIo = 4 };

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

void say(const std::string& s) { std::cerr << s << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xgram: token-indexed memory engine"};
  app.require_subcommand(1);

  // stats
  auto* stats_cmd = app.add_subcommand("stats", "count token frequencies");
  std::string ids_path, ids_format = "bin", run_config, out;
  std::size_t vocab = 0, threads = 1;
  auto* ids_opt = stats_cmd->add_option("--ids", ids_path, "token id file");
  stats_cmd->add_option("--ids-format", ids_format, "bin or txt")->check(CLI::IsMember({"bin", "txt"}));
  stats_cmd->add_option("--vocab", vocab, "vocabulary size (required with --ids)");
  stats_cmd->add_option("--threads", threads, "counting shards");
  auto* stats_cfg = stats_cmd->add_option("--config", run_config, "sample the data source of a run config");
  ids_opt->excludes(stats_cfg);
  stats_cmd->add_option("--out", out, "frequency table json")->required();

  // zipf
  auto* zipf_cmd = app.add_subcommand("zipf", "write a synthetic Zipf token stream");
  double exponent = 1.1;
  std::size_t length = 0;
  std::uint64_t seed = 0;
  zipf_cmd->add_option("--vocab", vocab)->required();
  zipf_cmd->add_option("--exponent", exponent);
  zipf_cmd->add_option("--length", length)->required();
  zipf_cmd->add_option("--seed", seed);
  zipf_cmd->add_option("--ids-format", ids_format)->check(CLI::IsMember({"bin", "txt"}));
  zipf_cmd->add_option("--out", out)->required();

  // plan
  auto* plan_cmd = app.add_subcommand("plan", "build a routing plan");
  std::string freq_path, routing_path, plan_path;
  plan_cmd->add_option("--freq", freq_path, "frequency table json")->required();
  plan_cmd->add_option("--config", routing_path, "routing toml")->required();
  plan_cmd->add_option("--out", plan_path, "plan file")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model");
  std::string trace_path, ckpt_path, hits_out, access_out;
  train_cmd->add_option("--config", run_config, "run toml")->required();
  train_cmd->add_option("--plan", plan_path, "routing plan")->required();
  train_cmd->add_option("--trace", trace_path, "loss trace csv")->required();
  train_cmd->add_option("--checkpoint-out", ckpt_path, "checkpoint file")->required();
  train_cmd->add_option("--hits-out", hits_out, "per-table row hit counts");
  train_cmd->add_option("--access-out", access_out, "unique rows of the last batch");
  bool quiet = false;
  train_cmd->add_flag("--quiet", quiet);

  // diagnose
  auto* diag_cmd = app.add_subcommand("diagnose", "diagnostics report for a checkpoint");
  std::string hits_path;
  std::size_t batches = 0;
  diag_cmd->add_option("--checkpoint", ckpt_path)->required();
  diag_cmd->add_option("--plan", plan_path)->required();
  diag_cmd->add_option("--hits", hits_path, "hits file from train");
  diag_cmd->add_option("--batches", batches, "validation batches (default from config)");
  diag_cmd->add_option("--out", out)->required();

  // budget
  auto* budget_cmd = app.add_subcommand("budget", "parameter / activation / FLOP budget");
  budget_cmd->add_option("--config", run_config)->required();
  budget_cmd->add_option("--out", out, "write json here instead of stdout");

  // offload-sim
  auto* off_cmd = app.add_subcommand("offload-sim", "host-to-device prefetch time");
  std::string access_path;
  double bw = 16e9, bytes = 2.0;
  off_cmd->add_option("--trace", access_path, "access file from train")->required();
  off_cmd->add_option("--bw", bw, "bytes per second");
  off_cmd->add_option("--bytes", bytes, "bytes per stored value");

  // run
  auto* run_cmd = app.add_subcommand("run", "stats -> plan -> train -> diagnose with caching");
  std::string out_dir;
  run_cmd->add_option("--config", run_config)->required();
  run_cmd->add_option("--out-dir", out_dir)->required();

  // compare
  auto* cmp_cmd = app.add_subcommand("compare", "paired runs over variants and seeds");
  std::string variants = "baseline,ple,xgram-1x", seeds = "0";
  cmp_cmd->add_option("--config", run_config)->required();
  cmp_cmd->add_option("--variants", variants, "comma-separated variants");
  cmp_cmd->add_option("--seeds", seeds, "comma-separated seeds");
  cmp_cmd->add_option("--out-dir", out_dir)->required();
  cmp_cmd->add_option("--out", out, "also write the comparison as json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (stats_cmd->parsed()) {
      stats::FrequencyTable freq;
      if (!ids_path.empty()) {
        if (vocab == 0) throw ValidationError("--vocab is required with --ids");
        const auto ids = stats::read_token_ids(ids_path, stats::parse_ids_format(ids_format));
        freq = stats::count_tokens_sharded(ids, vocab, std::max<std::size_t>(threads, 1));
      } else if (!run_config.empty()) {
        const auto cfg = config::load_run_config(run_config);
        const auto src = config::make_source(cfg.data, cfg.backbone.vocab_size);
        freq = stats::count_tokens(data::sample_tokens(*src, cfg.stats_tokens, cfg.backbone.seq_len),
                                   cfg.backbone.vocab_size);
      } else {
        throw ValidationError("stats needs --ids or --config");
      }
      io::write_text(out, stats::frequency_to_json(freq));
      say("counted " + std::to_string(freq.total) + " tokens over " + std::to_string(freq.vocab_size) + " ids");
    } else if (zipf_cmd->parsed()) {
      const auto ids = stats::zipf_stream(seed, vocab, exponent, length);
      stats::write_token_ids(out, ids, stats::parse_ids_format(ids_format));
    } else if (plan_cmd->parsed()) {
      const auto freq = stats::frequency_from_json(io::read_text(freq_path));
      const auto plan = routing::build_plan(freq, config::load_routing_config(routing_path));
      io::write_file(plan_path, routing::serialize_plan(plan));
      say("plan: " + std::to_string(plan.physical_rows) + " rows for " + std::to_string(plan.vocab_size) + " tokens");
    } else if (train_cmd->parsed()) {
      auto cfg = config::load_run_config(run_config);
      auto plan = std::make_shared<const routing::RoutingPlan>(routing::deserialize_plan(io::read_file(plan_path)));
      if (plan->config != cfg.routing) {
        say("note: routing settings taken from the plan file, not the run config");
        cfg.routing = plan->config;
        cfg.validate();
      }
      const auto source = config::make_source(cfg.data, cfg.backbone.vocab_size);
      const auto warm = static_cast<std::size_t>(
          std::llround(cfg.optimizer.warmup_fraction * static_cast<double>(cfg.train.steps)));
      model::Model m(cfg.backbone, cfg.injection, plan, cfg.train.seed, warm);
      const auto res = train::train(m, *source, cfg.train, cfg.optimizer, [&](const train::TraceRow& r) {
        if (quiet || std::isnan(r.val_loss)) return;
        char buf[96];
        std::snprintf(buf, sizeof buf, "step %zu train %.4f val %.4f", r.step, r.train_loss, r.val_loss);
        say(buf);
      });
      io::write_text(trace_path, train::trace_csv(res.trace, cfg.backbone.layers));
      io::write_file(ckpt_path, m.save(config::to_json(cfg)).serialize());
      if (!hits_out.empty()) io::write_file(hits_out, train::serialize_hits(train::collect_hits(m)));
      if (!access_out.empty()) io::write_file(access_out, train::serialize_access(res.last_batch_access));
      std::printf("final_val_loss %.6f\n", res.final_val_loss);
    } else if (diag_cmd->parsed()) {
      auto run = pipeline::load_checkpoint(ckpt_path, plan_path);
      std::vector<train::TableHits> hits;
      if (!hits_path.empty()) hits = train::deserialize_hits(io::read_file(hits_path));
      const auto source = config::make_source(run.config.data, run.config.backbone.vocab_size);
      const auto rep = analysis::diagnose(*run.model, *source, hits,
                                          {batches ? batches : run.config.diagnose_batches, run.config.train.batch});
      io::write_text(out, analysis::report_json(rep));
    } else if (budget_cmd->parsed()) {
      const auto text = pipeline::budget_json(config::load_run_config(run_config));
      if (out.empty())
        std::cout << text;
      else
        io::write_text(out, text);
    } else if (off_cmd->parsed()) {
      const auto records = train::deserialize_access(io::read_file(access_path));
      nlohmann::json j;
      j["version"] = 1;
      j["bandwidth"] = bw;
      j["bytes_per_value"] = bytes;
      j["seconds"] = analysis::offload_time(records, bytes, bw);
      j["records"] = nlohmann::json::array();
      for (const auto& r : records)
        j["records"].push_back({{"layer", r.layer}, {"view", r.view}, {"width", r.width},
                                {"rows", r.rows}, {"max_paths", r.max_paths},
                                {"unique_tokens", r.unique_tokens}, {"unique_rows", r.unique_rows}});
      std::cout << j.dump(2) << '\n';
    } else if (run_cmd->parsed()) {
      const auto res = pipeline::run_pipeline(config::load_run_config(run_config), out_dir, {true, say});
      std::printf("final_val_loss %.6f\n", res.final_val_loss);
    } else if (cmp_cmd->parsed()) {
      std::vector<std::uint64_t> seed_list;
      for (const auto& s : split(seeds)) seed_list.push_back(std::stoull(s));
      const auto rows = pipeline::compare(config::load_run_config(run_config), split(variants),
                                          seed_list, out_dir, {false, say});
      std::cout << pipeline::compare_table(rows);
      if (!out.empty()) io::write_text(out, pipeline::compare_json(rows));
    }
  } catch (const NumericError& e) {
    say(std::string("numeric failure: ") + e.what());
    return kNumeric;
  } catch (const IoError& e) {
    say(std::string("i/o error: ") + e.what());
    return kIo;
  } catch (const ValidationError& e) {
    say(std::string("invalid input: ") + e.what());
    return kValidation;
  } catch (const std::invalid_argument& e) {
    say(std::string("invalid input: ") + e.what());
    return kValidation;
  } catch (const std::exception& e) {
    say(std::string("error: ") + e.what());
    return kFailure;
  }
  return kOk;
}
