#pragma once

#include <memory>

#include "xgram/corpus_stats.hpp"
#include "xgram/injection.hpp"
#include "xgram/model.hpp"
#include "xgram/routing.hpp"

namespace xgram::testing {

// Small backbone used by the model-level tests.
inline model::BackboneConfig tiny_backbone() {
  model::BackboneConfig c;
  c.layers = 2;
  c.width = 16;
  c.ffn_width = 32;
  c.heads = 4;
  c.kv_heads = 2;
  c.seq_len = 8;
  c.vocab_size = 64;
  return c;
}

// Plan over a Zipf count table with every routing origin present.
inline std::shared_ptr<const routing::RoutingPlan> tiny_plan(std::size_t vocab, double rho = 0.5,
                                                             std::uint64_t seed = 3) {
  const auto stream = stats::zipf_stream(seed, vocab, 1.1, 20 * vocab);
  routing::RoutingConfig rc;
  rc.k_vip = 4;
  rc.num_buckets = 4;
  rc.rho = rho;
  return std::make_shared<const routing::RoutingPlan>(
      routing::build_plan(stats::count_tokens(stream, vocab), rc));
}

// One enabled view at every site, mixing extracted and raw branches.
inline injection::InjectionConfig all_sites(std::size_t layers) {
  using injection::Site;
  injection::InjectionConfig cfg;
  cfg.layers.resize(layers);
  for (auto& l : cfg.layers) {
    l.push_back({Site::kQ, 3, true, true, 0.5});
    l.push_back({Site::kK, 2, true, true, 0.5});
    l.push_back({Site::kV, 3, true, true, 0.5});
    l.push_back({Site::kV, 5, true, true, 0.5});
    l.push_back({Site::kO, 3, true, true, 0.5});
    l.push_back({Site::kInterLayer, 3, true, true, 0.5});
    l.push_back({Site::kInterLayer, 0, false, true, 0.5});
  }
  return cfg;
}

}  // namespace xgram::testing
