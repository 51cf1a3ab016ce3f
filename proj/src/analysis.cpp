#include "xgram/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>
#include "xgram/error.hpp"

namespace xgram::analysis {

void ActivationMagnitude::add(std::span<const TokenId> tokens, const Mat& delta) {
  if (static_cast<std::size_t>(delta.rows()) != tokens.size())
    throw ValidationError("activation magnitude: one delta row per token required");
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto& [sum, n] = sums_[tokens[i]];
    sum += delta.row(static_cast<Eigen::Index>(i)).norm();
    ++n;
  }
}

std::map<TokenId, TokenMagnitude> ActivationMagnitude::result() const {
  std::map<TokenId, TokenMagnitude> out;
  for (const auto& [token, acc] : sums_)
    out[token] = {acc.first / static_cast<double>(acc.second), acc.second};
  return out;
}

Similarity layer_similarity(const Mat& hidden, const Mat& embedded) {
  if (hidden.rows() != embedded.rows() || hidden.cols() != embedded.cols())
    throw ValidationError("layer similarity: hidden and embedded shapes differ");
  Similarity s;
  double total = 0.0;
  for (Eigen::Index r = 0; r < hidden.rows(); ++r) {
    const double nh = hidden.row(r).norm();
    const double ne = embedded.row(r).norm();
    if (nh == 0.0 || ne == 0.0) {
      ++s.skipped;
      continue;
    }
    total += hidden.row(r).dot(embedded.row(r)) / (nh * ne);
    ++s.used;
  }
  if (s.used) s.mean = total / static_cast<double>(s.used);
  return s;
}

Mat slot_cosine(std::span<const Mat> views) {
  if (views.size() < 2) throw ValidationError("slot cosine needs at least two views");
  for (const auto& v : views)
    if (v.rows() != views[0].rows() || v.cols() != views[0].cols())
      throw ValidationError("slot cosine: views must share a shape");
  const auto M = static_cast<Eigen::Index>(views.size());
  std::vector<Vec> norms;
  for (const auto& v : views) norms.push_back(v.rowwise().norm());
  Mat out = Mat::Identity(M, M);
  for (Eigen::Index a = 0; a < M; ++a)
    for (Eigen::Index b = a + 1; b < M; ++b) {
      double total = 0.0;
      std::size_t used = 0;
      for (Eigen::Index r = 0; r < views[0].rows(); ++r) {
        const double d = norms[a][r] * norms[b][r];
        if (d == 0.0) continue;
        total += views[a].row(r).dot(views[b].row(r)) / d;
        ++used;
      }
      out(a, b) = out(b, a) = used ? total / static_cast<double>(used) : 0.0;
    }
  return out;
}

std::vector<double> hit_concentration(std::span<const double> hits,
                                      std::span<const double> fractions) {
  if (hits.empty()) throw ValidationError("hit concentration: no rows");
  const double total = std::accumulate(hits.begin(), hits.end(), 0.0);
  if (!(total > 0.0)) throw ValidationError("hit concentration: no hits recorded");
  std::vector<std::size_t> order(hits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return hits[a] > hits[b]; });
  std::vector<double> out;
  for (const double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ValidationError("hit fractions must lie in (0, 1]");
    const auto top = std::min<std::size_t>(
        hits.size(), static_cast<std::size_t>(std::ceil(f * static_cast<double>(hits.size()))));
    double sum = 0.0;
    for (std::size_t i = 0; i < top; ++i) sum += hits[order[i]];
    out.push_back(sum / total);
  }
  return out;
}

double percentile(std::span<const double> values, double q) {
  if (values.empty()) throw ValidationError("percentile of an empty set");
  if (!(q >= 0.0 && q <= 1.0)) throw ValidationError("percentile rank must lie in [0, 1]");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double median(std::span<const double> values) { return percentile(values, 0.5); }

MovementStats movement_stats(const Mat& values, const Mat& init,
                             std::span<const routing::RowIndex> reachable) {
  if (values.rows() != init.rows() || values.cols() != init.cols())
    throw ValidationError("movement: table and snapshot shapes differ");
  if (reachable.empty()) throw ValidationError("movement: no reachable rows");
  MovementStats s;
  s.movement.reserve(reachable.size());
  for (const auto j : reachable) {
    if (j >= values.rows()) throw ValidationError("movement: reachable row out of range");
    const double base = init.row(j).norm();
    if (base == 0.0)
      throw ValidationError("movement: row " + std::to_string(j) + " was initialized to zero");
    s.movement.push_back((values.row(j) - init.row(j)).norm() / base);
  }
  const double n = static_cast<double>(s.movement.size());
  s.mean = std::accumulate(s.movement.begin(), s.movement.end(), 0.0) / n;
  double var = 0.0;
  for (const double m : s.movement) var += (m - s.mean) * (m - s.mean);
  s.stddev = std::sqrt(var / n);
  s.cv = s.mean > 0.0 ? s.stddev / s.mean : 0.0;
  s.p25 = percentile(s.movement, 0.25);
  s.p75 = percentile(s.movement, 0.75);
  s.gap = s.p25 > 0.0 ? s.p75 / s.p25 : std::numeric_limits<double>::infinity();
  if (s.p25 == 0.0 && s.p75 == 0.0) s.gap = 1.0;
  return s;
}

std::uint64_t kappa(std::uint64_t paths, std::uint64_t kernel) { return paths + 2 * kernel + 1; }

SiteBudget site_budget(injection::Site site, std::uint64_t vocab, std::uint64_t width,
                       std::uint64_t kv_width, double rho, std::uint64_t paths,
                       std::uint64_t kernel) {
  if (vocab == 0 || width == 0 || kv_width == 0 || kv_width > width)
    throw ValidationError("budget: inconsistent dimensions");
  if (!(rho > 0.0 && rho <= 1.0)) throw ValidationError("budget: rho must lie in (0, 1]");
  if (paths == 0) throw ValidationError("budget: at least one path per token");
  const std::uint64_t ds = injection::site_width(site, width, kv_width);
  const auto rows = static_cast<std::uint64_t>(std::llround(rho * static_cast<double>(vocab)));
  return {rows * ds, ds, kappa(paths, kernel) * ds};
}

std::vector<BudgetRow> budget_table(std::uint64_t vocab, std::uint64_t width, std::uint64_t kv_width,
                                    double rho, std::uint64_t paths, std::uint64_t kernel) {
  using injection::Site;
  const auto row = [&](const char* label, Site site, double r) {
    return BudgetRow{label, site_budget(site, vocab, width, kv_width, r, paths, kernel)};
  };
  return {row("Q", Site::kQ, 1.0),
          row("K", Site::kK, 1.0),
          row("V", Site::kV, 1.0),
          row("O", Site::kO, 1.0),
          row("Inter-layer", Site::kInterLayer, 1.0),
          row("V + hash", Site::kV, rho),
          row("Inter-layer + hash", Site::kInterLayer, rho)};
}

double offload_time(std::span<const std::uint64_t> unique_rows, std::uint64_t width,
                    double bytes_per_value, double bandwidth) {
  if (!(bandwidth > 0.0)) throw ValidationError("offload: bandwidth must be positive");
  if (!(bytes_per_value > 0.0)) throw ValidationError("offload: bytes per value must be positive");
  double total = 0.0;
  for (const auto u : unique_rows)
    total += static_cast<double>(u) * static_cast<double>(width) * bytes_per_value / bandwidth;
  return total;
}

double offload_time(std::span<const train::AccessRecord> records, double bytes_per_value,
                    double bandwidth) {
  if (!(bandwidth > 0.0)) throw ValidationError("offload: bandwidth must be positive");
  if (!(bytes_per_value > 0.0)) throw ValidationError("offload: bytes per value must be positive");
  double total = 0.0;
  for (const auto& r : records) {
    const std::uint64_t bound =
        std::min<std::uint64_t>(r.rows, static_cast<std::uint64_t>(r.max_paths) * r.unique_tokens);
    if (r.unique_rows > bound)
      throw ValidationError("offload: layer " + std::to_string(r.layer) + " view " +
                            std::to_string(r.view) + " references " +
                            std::to_string(r.unique_rows) + " rows, above min(S, K*U) = " +
                            std::to_string(bound));
    total += static_cast<double>(r.unique_rows) * r.width * bytes_per_value / bandwidth;
  }
  return total;
}

DiagnosticsReport diagnose(model::Model& model, const data::Source& source,
                           std::span<const train::TableHits> hits, const DiagnoseOptions& opts) {
  if (opts.batches == 0 || opts.batch == 0) throw ValidationError("diagnose: empty evaluation set");
  DiagnosticsReport rep;
  const auto& cfg = model.backbone();
  // Any step past warmup evaluates the gates at their full value.
  const std::size_t step = model.gate_schedule().total_warm_steps;
  ActivationMagnitude act;
  std::vector<std::array<double, 2>> sim_sum(cfg.layers, {0.0, 0.0});
  std::vector<std::array<std::size_t, 2>> sim_used(cfg.layers, {0, 0});
  std::vector<std::array<std::size_t, 2>> sim_skipped(cfg.layers, {0, 0});
  std::map<std::pair<std::uint32_t, int>, std::vector<std::uint32_t>> groups;
  std::map<std::pair<std::uint32_t, int>, std::vector<std::vector<Mat>>> group_views;

  const auto& views = model.views();
  for (std::size_t l = 0; l < views.size(); ++l)
    for (std::size_t m = 0; m < views[l].size(); ++m)
      groups[{static_cast<std::uint32_t>(l), static_cast<int>(views[l][m].spec.site)}].push_back(
          static_cast<std::uint32_t>(m));

  std::vector<stats::TokenId> inputs, targets;
  for (std::size_t b = 0; b < opts.batches; ++b) {
    train::make_batch(source, true, b * opts.batch, opts.batch, cfg.seq_len, inputs, targets);
    model::ForwardCache cache;
    model.forward(inputs, opts.batch, step, &cache);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const auto& lc = cache.layers[l];
      // Per-layer Delta norm combines all sites of the layer.
      Vec sq = Vec::Zero(static_cast<Eigen::Index>(inputs.size()));
      bool any = false;
      for (const auto& d : lc.delta)
        if (d) {
          sq += d->rowwise().squaredNorm();
          any = true;
        }
      if (any) act.add(inputs, sq.cwiseSqrt());
      const auto a = layer_similarity(lc.attn_out, cache.embedded);
      const auto f = layer_similarity(lc.ffn_out, cache.embedded);
      sim_sum[l][0] += a.mean * static_cast<double>(a.used);
      sim_sum[l][1] += f.mean * static_cast<double>(f.used);
      sim_used[l][0] += a.used;
      sim_used[l][1] += f.used;
      sim_skipped[l][0] += a.skipped;
      sim_skipped[l][1] += f.skipped;
    }
    for (const auto& [key, members] : groups) {
      if (members.size() < 2) continue;
      std::vector<Mat> mats;
      for (const auto m : members) mats.push_back(cache.layers[key.first].views[m].retrieved);
      group_views[key].push_back(std::move(mats));
    }
  }
  rep.activation = act.result();
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerSimilarity ls;
    for (int c = 0; c < 2; ++c) {
      auto& s = c == 0 ? ls.attn : ls.ffn;
      s.used = sim_used[l][c];
      s.skipped = sim_skipped[l][c];
      s.mean = s.used ? sim_sum[l][c] / static_cast<double>(s.used) : 0.0;
    }
    rep.layer_sim.push_back(ls);
  }
  for (const auto& [key, batches] : group_views) {
    // Stack the evaluation batches so the cosine averages over every position.
    std::vector<Mat> stacked(batches[0].size());
    for (std::size_t m = 0; m < stacked.size(); ++m) {
      Eigen::Index rows = 0;
      for (const auto& b : batches) rows += b[m].rows();
      stacked[m].resize(rows, batches[0][m].cols());
      Eigen::Index at = 0;
      for (const auto& b : batches) {
        stacked[m].middleRows(at, b[m].rows()) = b[m];
        at += b[m].rows();
      }
    }
    rep.slot_cos.push_back({key.first, injection::site_name(static_cast<injection::Site>(key.second)),
                            groups[key], slot_cosine(stacked)});
  }

  if (model.plan()) {
    const auto reachable = routing::reachable_rows(*model.plan());
    std::vector<double> cvs, gaps;
    std::vector<std::vector<double>> ratios(kHitFractions.size());
    for (std::size_t l = 0; l < views.size(); ++l)
      for (std::size_t m = 0; m < views[l].size(); ++m) {
        const auto& v = views[l][m];
        TableDiagnostics t;
        t.layer = static_cast<std::uint32_t>(l);
        t.view = static_cast<std::uint32_t>(m);
        t.site = injection::site_name(v.spec.site);
        t.movement = movement_stats(v.table.values(), v.table.init_snapshot(), reachable);
        cvs.push_back(t.movement.cv);
        gaps.push_back(t.movement.gap);
        for (const auto& h : hits) {
          if (h.layer != l || h.view != m) continue;
          if (h.hits.mass.size() != v.table.rows())
            throw ValidationError("hits file does not match the model's table sizes");
          if (h.hits.lookups == 0) break;
          t.hit_ratios = hit_concentration(h.hits.mass);
          std::vector<double> counts(h.hits.entries.begin(), h.hits.entries.end());
          t.entry_hit_ratios = hit_concentration(counts);
          for (std::size_t i = 0; i < kHitFractions.size(); ++i) ratios[i].push_back(t.hit_ratios[i]);
        }
        rep.tables.push_back(std::move(t));
      }
    if (!cvs.empty()) {
      rep.median_cv = median(cvs);
      rep.median_gap = median(gaps);
    }
    if (!ratios[0].empty())
      for (const auto& r : ratios) rep.median_hit_ratios.push_back(median(r));
  }
  return rep;
}

namespace {

nlohmann::json ratios_json(const std::vector<double>& r) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < r.size() && i < kHitFractions.size(); ++i) {
    char key[16];
    std::snprintf(key, sizeof key, "%g", kHitFractions[i]);
    j[key] = r[i];
  }
  return j;
}

nlohmann::json similarity_json(const Similarity& s) {
  return {{"mean", s.mean}, {"used", s.used}, {"skipped", s.skipped}};
}

}  // namespace

std::string report_json(const DiagnosticsReport& rep) {
  nlohmann::json j;
  j["version"] = kReportVersion;
  auto& act = j["activation_magnitude"];
  act["tokens"] = nlohmann::json::array();
  act["mean_norm"] = nlohmann::json::array();
  act["samples"] = nlohmann::json::array();
  for (const auto& [token, m] : rep.activation) {
    act["tokens"].push_back(token);
    act["mean_norm"].push_back(m.mean_norm);
    act["samples"].push_back(m.samples);
  }
  j["layer_similarity"] = nlohmann::json::array();
  for (std::size_t l = 0; l < rep.layer_sim.size(); ++l)
    j["layer_similarity"].push_back({{"layer", l},
                                     {"attn", similarity_json(rep.layer_sim[l].attn)},
                                     {"ffn", similarity_json(rep.layer_sim[l].ffn)}});
  j["slot_cosine"] = nlohmann::json::array();
  for (const auto& s : rep.slot_cos) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < s.matrix.rows(); ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index c = 0; c < s.matrix.cols(); ++c) row.push_back(s.matrix(r, c));
      rows.push_back(row);
    }
    j["slot_cosine"].push_back({{"layer", s.layer}, {"site", s.site}, {"views", s.views}, {"matrix", rows}});
  }
  j["tables"] = nlohmann::json::array();
  for (const auto& t : rep.tables) {
    nlohmann::json e = {{"layer", t.layer}, {"view", t.view}, {"site", t.site}};
    if (!t.hit_ratios.empty()) {
      e["hit_ratios"] = ratios_json(t.hit_ratios);
      e["entry_hit_ratios"] = ratios_json(t.entry_hit_ratios);
    }
    e["movement"] = {{"per_row", t.movement.movement}, {"mean", t.movement.mean},
                     {"cv", t.movement.cv},           {"p25", t.movement.p25},
                     {"p75", t.movement.p75},         {"gap", t.movement.gap}};
    j["tables"].push_back(std::move(e));
  }
  j["median"] = {{"cv", rep.median_cv}, {"gap", rep.median_gap}};
  if (!rep.median_hit_ratios.empty()) j["median"]["hit_ratios"] = ratios_json(rep.median_hit_ratios);
  return j.dump(2) + "\n";
}

}  // namespace xgram::analysis
