#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xgram/data.hpp"
#include "xgram/injection.hpp"
#include "xgram/model.hpp"
#include "xgram/tensor.hpp"
#include "xgram/train.hpp"

namespace xgram::analysis {

using stats::TokenId;

struct TokenMagnitude {
  double mean_norm = 0.0;
  std::uint64_t samples = 0;  // occurrences x layers
};

// Running mean of ||Delta_{l,t}|| per token type.
class ActivationMagnitude {
 public:
  // `delta` rows align with `tokens`.
  void add(std::span<const TokenId> tokens, const Mat& delta);
  // Tokens never added are absent.
  std::map<TokenId, TokenMagnitude> result() const;

 private:
  std::map<TokenId, std::pair<double, std::uint64_t>> sums_;
};

struct Similarity {
  double mean = 0.0;
  std::size_t used = 0;
  std::size_t skipped = 0;  // positions with a zero vector on either side
};

// Mean cosine between matched rows of h and e.
Similarity layer_similarity(const Mat& hidden, const Mat& embedded);

// Pairwise mean row cosine between equally shaped views; unit diagonal.
Mat slot_cosine(std::span<const Mat> views);

inline const std::vector<double> kHitFractions{0.001, 0.01, 0.1};

// Share of total hits absorbed by the top ceil(f * S) rows (hits desc, ties by index).
std::vector<double> hit_concentration(std::span<const double> hits,
                                      std::span<const double> fractions = kHitFractions);

struct MovementStats {
  std::vector<double> movement;  // m_j for each reachable row, in row order
  double mean = 0.0;
  double stddev = 0.0;  // population
  double cv = 0.0;
  double p25 = 0.0;
  double p75 = 0.0;
  double gap = 0.0;  // p75 / p25
};

// Linear interpolation between closest ranks: position q * (n - 1) in sorted order.
double percentile(std::span<const double> values, double q);
double median(std::span<const double> values);

// m_j = ||B[j] - B0[j]|| / ||B0[j]|| over the reachable rows.
MovementStats movement_stats(const Mat& values, const Mat& init,
                             std::span<const routing::RowIndex> reachable);

// kappa = K + 2k + 1.
std::uint64_t kappa(std::uint64_t paths, std::uint64_t kernel);

struct SiteBudget {
  std::uint64_t params = 0;  // rho * S * d_s, with rho * S rounded to whole rows
  std::uint64_t dims = 0;    // d_s
  std::uint64_t flops = 0;   // kappa * d_s
};

// S is the vocabulary size; rho = 1 is the uncompressed table.
SiteBudget site_budget(injection::Site site, std::uint64_t vocab, std::uint64_t width,
                       std::uint64_t kv_width, double rho, std::uint64_t paths,
                       std::uint64_t kernel);

struct BudgetRow {
  std::string label;
  SiteBudget budget;
};

// The seven reference rows: Q, K, V, O, inter-layer at full size, then V and
// inter-layer with rho-compressed hashed tables.
std::vector<BudgetRow> budget_table(std::uint64_t vocab, std::uint64_t width, std::uint64_t kv_width,
                                    double rho, std::uint64_t paths, std::uint64_t kernel);

// sum_l U_l * d_s * b / BW in seconds.
double offload_time(std::span<const std::uint64_t> unique_rows, std::uint64_t width,
                    double bytes_per_value, double bandwidth);
// Same over recorded batches; enforces U_l <= min(S, K * U) for every record.
double offload_time(std::span<const train::AccessRecord> records, double bytes_per_value,
                    double bandwidth);

struct TableDiagnostics {
  std::uint32_t layer = 0;
  std::uint32_t view = 0;
  std::string site;
  std::vector<double> hit_ratios;  // per kHitFractions, mass-normalized hits
  std::vector<double> entry_hit_ratios;  // raw per-entry counts
  MovementStats movement;
};

struct SlotCosine {
  std::uint32_t layer = 0;
  std::string site;
  std::vector<std::uint32_t> views;
  Mat matrix;
};

struct LayerSimilarity {
  Similarity attn;
  Similarity ffn;
};

struct DiagnosticsReport {
  std::map<TokenId, TokenMagnitude> activation;
  std::vector<LayerSimilarity> layer_sim;
  std::vector<SlotCosine> slot_cos;
  std::vector<TableDiagnostics> tables;
  std::vector<double> median_hit_ratios;
  double median_cv = 0.0;
  double median_gap = 0.0;
};

struct DiagnoseOptions {
  std::size_t batches = 4;
  std::size_t batch = 8;
};

// Runs the model over fixed validation batches and combines the result with
// recorded table hits. `hits` may be empty, which leaves hit ratios out.
DiagnosticsReport diagnose(model::Model& model, const data::Source& source,
                           std::span<const train::TableHits> hits, const DiagnoseOptions& opts);

inline constexpr int kReportVersion = 1;
std::string report_json(const DiagnosticsReport& report);

}  // namespace xgram::analysis
