#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "xgram/corpus_stats.hpp"
#include "xgram/data.hpp"
#include "xgram/injection.hpp"
#include "xgram/model.hpp"
#include "xgram/routing.hpp"
#include "xgram/train.hpp"

namespace xgram::config {

struct DataConfig {
  std::string source = "markov";  // markov | zipf | ids
  double zipf_exponent = 1.1;     // marginal of the markov and zipf sources
  double noise = 0.25;            // markov: probability of a fresh Zipf draw
  std::vector<double> lag_weights{0.45, 0.35, 0.2};
  std::uint64_t seed = 7;
  std::string path;               // ids source
  stats::IdsFormat ids_format = stats::IdsFormat::kBinary;
  double validation_fraction = 0.1;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct RunConfig {
  std::string name = "run";
  std::string backbone_preset = "desk";
  model::BackboneConfig backbone;
  routing::RoutingConfig routing;
  std::string injection_preset = "1x";  // empty when layers were given explicitly
  double lambda_init = 0.1;
  injection::InjectionConfig injection;
  model::OptimizerConfig optimizer;
  train::TrainConfig train;
  DataConfig data;
  std::size_t stats_tokens = std::size_t{1} << 20;  // size of the sampled stats corpus
  std::size_t diagnose_batches = 4;

  // Referential integrity: widths, plan compatibility, presets.
  void validate() const;
};

// Parses TOML. Unknown keys and wrongly typed values raise ValidationError
// naming the offending key.
RunConfig parse_run_config(const std::string& toml_text);
RunConfig load_run_config(const std::filesystem::path& path);

// Accepts either a [routing] table or routing keys at the top level.
routing::RoutingConfig parse_routing_config(const std::string& toml_text);
routing::RoutingConfig load_routing_config(const std::filesystem::path& path);

// Canonical JSON (sorted keys); stable across runs and used for content hashes
// and checkpoint metadata.
std::string to_json(const RunConfig& cfg);
RunConfig from_json(const std::string& json_text);
std::string routing_to_json(const routing::RoutingConfig& cfg);
std::string data_to_json(const DataConfig& cfg, std::size_t vocab_size, std::size_t stats_tokens);

// Expands a preset name, applying lambda_init to every view.
injection::InjectionConfig expand_injection(const std::string& preset, std::size_t layers,
                                            double lambda_init);

std::unique_ptr<data::Source> make_source(const DataConfig& cfg, std::size_t vocab_size);

}  // namespace xgram::config
