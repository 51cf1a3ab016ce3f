#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "xgram/corpus_stats.hpp"
#include "xgram/io.hpp"

namespace xgram::routing {

using stats::TokenId;
using RowIndex = std::uint32_t;

inline constexpr std::uint32_t kNoBucket = std::numeric_limits<std::uint32_t>::max();
inline constexpr RowIndex kNoRow = std::numeric_limits<RowIndex>::max();

struct RoutingConfig {
  std::size_t k_vip = 200;
  std::size_t num_buckets = 32;
  double rho = 0.5;  // S / |V|
  std::size_t hash_paths = 2;
  double alpha = 0.5;
  std::size_t max_extra_paths = 3;
  double decay = 0.8;
  std::uint64_t plan_seed = 0;

  // Checks the scalar ranges; vocabulary-dependent checks live in build_plan.
  void validate() const;
  friend bool operator==(const RoutingConfig&, const RoutingConfig&) = default;
};

enum class Origin : std::uint8_t { kVip = 0, kSparseDirect = 1, kSparseAlias = 2, kDenseHash = 3 };

const char* origin_name(Origin origin);

struct AccessEntry {
  RowIndex row;
  double coeff;
  friend bool operator==(const AccessEntry&, const AccessEntry&) = default;
};

// Rows visited by one token with their flattened aggregation coefficients.
// A row appears once; contributions from several paths landing on it are summed.
struct AccessList {
  std::vector<AccessEntry> entries;
  Origin origin = Origin::kVip;
};

// Immutable token -> physical row mapping.
//
// Rows [0, k_vip) hold the VIP head, one row per token in rank order. The body
// rows [k_vip, S) are split into one contiguous range per logical bucket.
// Sparse buckets map tokens directly; their unused rows are recycled as alias
// rows for the highest-mass sparse tokens. Dense buckets use H bucket-local
// multiplicative hashes per token.
struct RoutingPlan {
  RoutingConfig config;
  std::uint64_t vocab_size = 0;
  std::uint64_t physical_rows = 0;
  std::vector<TokenId> vip_tokens;
  std::vector<std::uint32_t> bucket_of;      // per token; kNoBucket for VIP
  std::vector<RowIndex> bucket_begin;        // num_buckets + 1 boundaries
  std::vector<std::uint8_t> bucket_dense;    // per bucket
  std::vector<RowIndex> direct_row;          // per token; kNoRow for dense tokens
  std::vector<std::uint32_t> alias_offsets;  // CSR over tokens, size vocab + 1
  std::vector<RowIndex> alias_rows;          // alias c of token w at alias_offsets[w] + c - 1
  std::vector<std::uint64_t> hash_multipliers;  // [bucket * hash_paths + path]

  std::size_t num_buckets() const { return bucket_dense.size(); }
  std::size_t vip_rows() const { return config.k_vip; }
  bool is_vip_row(RowIndex row) const { return row < config.k_vip; }

  friend bool operator==(const RoutingPlan&, const RoutingPlan&) = default;
};

// Tokens ordered by (count desc, id asc).
std::vector<TokenId> rank_tokens(const stats::FrequencyTable& freq);

std::vector<TokenId> select_vip(const stats::FrequencyTable& freq, std::size_t k_vip);

struct BucketPartition {
  std::vector<std::size_t> boundaries;  // B + 1 offsets into the ordered token list
  std::vector<double> bucket_mass;
  double max_over_mean = 0.0;
};

// Greedy cumulative cut: bucket j closes at the first token where the running
// mass reaches (j + 1) / B of the total, keeping every bucket non-empty.
BucketPartition partition_buckets(std::span<const double> ordered_mass, std::size_t num_buckets);

RoutingPlan build_plan(const stats::FrequencyTable& freq, const RoutingConfig& cfg);

// Bucket-local hash of `token` for one (bucket, path) pair.
RowIndex hash_row(const RoutingPlan& plan, std::uint32_t bucket, std::size_t path, TokenId token);

AccessList access_list(const RoutingPlan& plan, TokenId token);

// Candidate-slot weights for `extra_paths` alias slots: decay^c normalized over c = 0..extra.
std::vector<double> slot_weights(std::size_t extra_paths, double decay);

// Every row in the image of some token's access list, ascending.
std::vector<RowIndex> reachable_rows(const RoutingPlan& plan);

// Throws FormatError describing the first violated structural invariant.
void validate_plan(const RoutingPlan& plan);

// Binary layout: see docs/plan_format.md.
inline constexpr std::uint32_t kPlanVersion = 1;
io::Bytes serialize_plan(const RoutingPlan& plan);
RoutingPlan deserialize_plan(std::span<const std::uint8_t> bytes);

// Flattened access lists for every token, built once per plan for the hot path.
class AccessIndex {
 public:
  AccessIndex() = default;
  explicit AccessIndex(const RoutingPlan& plan);

  std::size_t vocab_size() const { return offsets_.empty() ? 0 : offsets_.size() - 1; }
  std::size_t physical_rows() const { return physical_rows_; }
  std::size_t max_entries() const { return max_entries_; }

  std::span<const AccessEntry> entries(TokenId token) const {
    return {entries_.data() + offsets_[token], entries_.data() + offsets_[token + 1]};
  }
  Origin origin(TokenId token) const { return origins_[token]; }

 private:
  std::vector<std::uint32_t> offsets_;
  std::vector<AccessEntry> entries_;
  std::vector<Origin> origins_;
  std::size_t physical_rows_ = 0;
  std::size_t max_entries_ = 0;
};

}  // namespace xgram::routing
