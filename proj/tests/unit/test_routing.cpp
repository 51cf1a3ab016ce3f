#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <numeric>

#include "xgram/analysis.hpp"
#include "xgram/corpus_stats.hpp"
#include "xgram/error.hpp"
#include "xgram/rng.hpp"
#include "xgram/routing.hpp"

using namespace xgram;
using namespace xgram::routing;

namespace {

const stats::FrequencyTable& zipf_table() {
  static const auto f = stats::count_tokens(stats::zipf_stream(42, 10000, 1.1, 1000000), 10000);
  return f;
}

std::size_t alias_count(const RoutingPlan& p, TokenId t) {
  return p.alias_offsets[t + 1] - p.alias_offsets[t];
}

}  // namespace

TEST(SelectVip, TieBrokenByLowerId) {
  const auto f = stats::make_frequency_table({5, 3, 3, 1});
  EXPECT_EQ(select_vip(f, 2), (std::vector<TokenId>{0, 1}));
  EXPECT_TRUE(select_vip(f, 0).empty());
  EXPECT_THROW(select_vip(f, 5), ValidationError);
}

TEST(SelectVip, MatchesFullSortOracle) {
  const auto& f = zipf_table();
  std::vector<TokenId> ids(f.vocab_size);
  std::iota(ids.begin(), ids.end(), 0);
  std::sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) {
    return f.counts[a] != f.counts[b] ? f.counts[a] > f.counts[b] : a < b;
  });
  ids.resize(200);
  EXPECT_EQ(select_vip(f, 200), ids);
}

TEST(PartitionBuckets, UniformMass) {
  const std::vector<double> m(32, 1.0);
  const auto p = partition_buckets(m, 4);
  EXPECT_EQ(p.boundaries, (std::vector<std::size_t>{0, 8, 16, 24, 32}));
  for (double b : p.bucket_mass) EXPECT_EQ(b, 8.0);
  EXPECT_EQ(p.max_over_mean, 1.0);
}

TEST(PartitionBuckets, GreedyCut) {
  const std::vector<double> m{4, 1, 1, 1, 1};
  const auto p = partition_buckets(m, 2);
  EXPECT_EQ(p.boundaries, (std::vector<std::size_t>{0, 1, 5}));
  EXPECT_EQ(p.bucket_mass, (std::vector<double>{4, 4}));
}

TEST(PartitionBuckets, EveryBucketNonEmpty) {
  const std::vector<double> m{100, 1, 1, 1};
  const auto p = partition_buckets(m, 4);
  for (std::size_t b = 0; b < 4; ++b) EXPECT_LT(p.boundaries[b], p.boundaries[b + 1]);
  EXPECT_THROW(partition_buckets(m, 5), ValidationError);
}

TEST(PartitionBuckets, ZipfBalanced) {
  const auto& f = zipf_table();
  const auto ranked = rank_tokens(f);
  const auto mass = stats::smoothed_mass(f, 0.5).mass;
  std::vector<double> ordered;
  for (std::size_t i = 200; i < ranked.size(); ++i) ordered.push_back(mass[ranked[i]]);
  const auto p = partition_buckets(ordered, 32);
  const double total = std::accumulate(ordered.begin(), ordered.end(), 0.0);
  const double mx = *std::max_element(p.bucket_mass.begin(), p.bucket_mass.end());
  EXPECT_LE(mx / (total / 32), 1.15);
  EXPECT_NEAR(p.max_over_mean, mx / (total / 32), 1e-12);
}

TEST(SlotWeights, GeometricNormalization) {
  const auto w = slot_weights(2, 0.8);
  ASSERT_EQ(w.size(), 3u);
  EXPECT_NEAR(w[0], 1.0 / 2.44, 1e-15);
  EXPECT_NEAR(w[1], 0.8 / 2.44, 1e-15);
  EXPECT_NEAR(w[2], 0.64 / 2.44, 1e-15);
  EXPECT_NEAR(w[0], 0.40984, 5e-6);
  EXPECT_NEAR(w[1], 0.32787, 5e-6);
  EXPECT_NEAR(w[2], 0.26230, 5e-6);
}

TEST(BuildPlan, FullCapacityIsBijective) {
  RoutingConfig c;
  c.rho = 1.0;
  c.hash_paths = 1;
  c.max_extra_paths = 0;
  const auto plan = build_plan(zipf_table(), c);
  EXPECT_EQ(plan.physical_rows, 10000u);
  std::vector<int> seen(10000, 0);
  for (TokenId t = 0; t < 10000; ++t) {
    const auto a = access_list(plan, t);
    ASSERT_EQ(a.entries.size(), 1u);
    EXPECT_EQ(a.entries[0].coeff, 1.0);
    ++seen[a.entries[0].row];
  }
  EXPECT_TRUE(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
}

TEST(BuildPlan, DefaultsCoverEveryToken) {
  const auto plan = build_plan(zipf_table(), RoutingConfig{});
  EXPECT_EQ(plan.physical_rows, 5000u);
  std::map<Origin, int> origins;
  for (TokenId t = 0; t < 10000; ++t) {
    const auto a = access_list(plan, t);
    ASSERT_FALSE(a.entries.empty());
    ++origins[a.origin];
    const bool vip = a.origin == Origin::kVip;
    for (const auto& e : a.entries) {
      ASSERT_LT(e.row, plan.physical_rows);
      EXPECT_GE(e.coeff, 0.0);
      EXPECT_TRUE(std::isfinite(e.coeff));
      if (vip) EXPECT_LT(e.row, 200u);
      else EXPECT_GE(e.row, 200u);
    }
  }
  EXPECT_EQ(origins[Origin::kVip], 200);
  EXPECT_GT(origins[Origin::kDenseHash], 0);
  EXPECT_NO_THROW(validate_plan(plan));
  // bucket ranges partition the body
  EXPECT_EQ(plan.bucket_begin.front(), 200u);
  EXPECT_EQ(plan.bucket_begin.back(), 5000u);
  for (std::size_t b = 0; b + 1 < plan.bucket_begin.size(); ++b)
    EXPECT_LT(plan.bucket_begin[b], plan.bucket_begin[b + 1]);
}

TEST(BuildPlan, CoverageOverRandomConfigs) {
  SplitMix64 rng(77);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t V = 100 + rng.next() % 900;
    const auto f = stats::count_tokens(stats::zipf_stream(rng.next(), V, 0.5 + rng.uniform(), 5 * V), V);
    RoutingConfig c;
    c.num_buckets = 1 + rng.next() % 8;
    c.k_vip = rng.next() % 20;
    c.rho = 0.1 + 0.9 * rng.uniform();
    c.hash_paths = 1 + rng.next() % 3;
    c.max_extra_paths = rng.next() % 4;
    c.plan_seed = rng.next();
    if (static_cast<double>(c.k_vip) >= c.rho * V) continue;
    const auto plan = build_plan(f, c);
    for (TokenId t = 0; t < V; ++t) {
      const auto a = access_list(plan, t);
      ASSERT_FALSE(a.entries.empty());
      for (const auto& e : a.entries) ASSERT_LT(e.row, plan.physical_rows);
    }
  }
}

TEST(BuildPlan, RejectsTooSmallRho) {
  RoutingConfig c;
  c.rho = 0.01;  // S = 100 <= k_vip
  EXPECT_THROW(build_plan(zipf_table(), c), ValidationError);
  c.rho = 0.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c.rho = 0.5;
  c.hash_paths = 0;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(BuildPlan, DeterministicBytes) {
  const auto a = serialize_plan(build_plan(zipf_table(), RoutingConfig{}));
  const auto b = serialize_plan(build_plan(zipf_table(), RoutingConfig{}));
  EXPECT_EQ(a, b);
}

TEST(AccessList, VipTokenIsItsRank) {
  const auto plan = build_plan(zipf_table(), RoutingConfig{});
  for (std::size_t i = 0; i < plan.vip_tokens.size(); ++i) {
    const auto a = access_list(plan, plan.vip_tokens[i]);
    ASSERT_EQ(a.entries.size(), 1u);
    EXPECT_EQ(a.entries[0].row, i);
    EXPECT_EQ(a.entries[0].coeff, 1.0);
    EXPECT_EQ(a.origin, Origin::kVip);
  }
}

TEST(AccessList, BaseSlotPlusTwoAliases) {
  // sqrt-smoothed mass puts three heavy tokens in a sparse bucket with 13 spare
  // rows; the rest is dense, so those three are the only alias recipients.
  std::vector<std::uint64_t> counts(40, 1);
  for (int t = 0; t < 4; ++t) counts[t] = 1000;
  RoutingConfig c;
  c.k_vip = 0;
  c.num_buckets = 2;
  c.rho = 0.8;
  c.max_extra_paths = 2;
  const auto plan = build_plan(stats::make_frequency_table(counts), c);
  ASSERT_FALSE(plan.bucket_dense[0]);
  ASSERT_TRUE(plan.bucket_dense[1]);
  for (TokenId t = 0; t < 3; ++t) {
    ASSERT_EQ(plan.bucket_of[t], 0u);
    ASSERT_EQ(alias_count(plan, t), 2u);
    const auto a = access_list(plan, t);
    EXPECT_EQ(a.origin, Origin::kSparseAlias);
    ASSERT_EQ(a.entries.size(), 3u);
    std::map<RowIndex, double> coeff;
    for (const auto& e : a.entries) coeff[e.row] = e.coeff;
    const std::size_t off = plan.alias_offsets[t];
    EXPECT_NEAR(coeff.at(plan.direct_row[t]), 1.0 / 2.44, 1e-15);
    EXPECT_NEAR(coeff.at(plan.alias_rows[off]), 0.8 / 2.44, 1e-15);
    EXPECT_NEAR(coeff.at(plan.alias_rows[off + 1]), 0.64 / 2.44, 1e-15);
  }
}

TEST(AccessList, AliasesGoToHighestMassFirst) {
  const auto plan = build_plan(zipf_table(), RoutingConfig{});
  std::vector<double> with, without;
  for (TokenId t = 0; t < 10000; ++t) {
    const auto b = plan.bucket_of[t];
    if (b == kNoBucket || plan.bucket_dense[b]) continue;
    (alias_count(plan, t) ? with : without).push_back(static_cast<double>(zipf_table().counts[t]));
  }
  ASSERT_FALSE(with.empty());
  if (!without.empty()) EXPECT_GE(*std::min_element(with.begin(), with.end()),
                                  *std::max_element(without.begin(), without.end()));
}

TEST(AccessList, DenseTokenTwoUnitPaths) {
  const auto plan = build_plan(zipf_table(), RoutingConfig{});
  bool found = false;
  for (TokenId t = 0; t < 10000 && !found; ++t) {
    const auto b = plan.bucket_of[t];
    if (b == kNoBucket || !plan.bucket_dense[b] || alias_count(plan, t) != 0) continue;
    const auto r0 = hash_row(plan, b, 0, t), r1 = hash_row(plan, b, 1, t);
    if (r0 == r1) continue;
    const auto a = access_list(plan, t);
    found = true;
    EXPECT_EQ(a.origin, Origin::kDenseHash);
    ASSERT_EQ(a.entries.size(), 2u);
    EXPECT_EQ(a.entries[0].coeff, 1.0);
    EXPECT_EQ(a.entries[1].coeff, 1.0);
    for (const auto& e : a.entries) {
      EXPECT_GE(e.row, plan.bucket_begin[b]);
      EXPECT_LT(e.row, plan.bucket_begin[b + 1]);
    }
  }
  EXPECT_TRUE(found);
}

TEST(AccessList, OutOfRangeToken) {
  const auto plan = build_plan(zipf_table(), RoutingConfig{});
  EXPECT_THROW(access_list(plan, 10000), ValidationError);
}

TEST(AccessIndex, MatchesAccessList) {
  const auto plan = build_plan(zipf_table(), RoutingConfig{});
  const AccessIndex idx(plan);
  for (TokenId t = 0; t < 10000; t += 7) {
    const auto a = access_list(plan, t);
    const auto e = idx.entries(t);
    ASSERT_EQ(std::vector<AccessEntry>(e.begin(), e.end()), a.entries);
    EXPECT_EQ(idx.origin(t), a.origin);
  }
}

TEST(PlanSerialization, RoundTrip) {
  const auto plan = build_plan(zipf_table(), RoutingConfig{});
  EXPECT_EQ(deserialize_plan(serialize_plan(plan)), plan);
}

TEST(PlanSerialization, VersionByteRejected) {
  auto bytes = serialize_plan(build_plan(zipf_table(), RoutingConfig{}));
  bytes[8] ^= 0xFF;
  EXPECT_THROW(deserialize_plan(bytes), VersionError);
}

TEST(PlanSerialization, TruncatedAndCorrupt) {
  auto bytes = serialize_plan(build_plan(zipf_table(), RoutingConfig{}));
  auto cut = bytes;
  cut.resize(bytes.size() / 2);
  EXPECT_THROW(deserialize_plan(cut), FormatError);
  bytes[bytes.size() / 2] ^= 0x01;
  EXPECT_THROW(deserialize_plan(bytes), FormatError);
}

TEST(PlanSerialization, SeedChangesHashParams) {
  RoutingConfig c;
  const auto a = build_plan(zipf_table(), c);
  c.plan_seed = 1;
  const auto b = build_plan(zipf_table(), c);
  EXPECT_NE(a.hash_multipliers, b.hash_multipliers);
  EXPECT_NE(serialize_plan(a), serialize_plan(b));
  for (auto m : a.hash_multipliers) EXPECT_EQ(m & 1u, 1u);
}

TEST(ReachableRows, AscendingImage) {
  const auto plan = build_plan(zipf_table(), RoutingConfig{});
  const auto rows = reachable_rows(plan);
  EXPECT_TRUE(std::is_sorted(rows.begin(), rows.end()));
  std::vector<char> img(plan.physical_rows, 0);
  for (TokenId t = 0; t < 10000; ++t)
    for (const auto& e : access_list(plan, t).entries) img[e.row] = 1;
  EXPECT_EQ(rows.size(), static_cast<std::size_t>(std::count(img.begin(), img.end(), 1)));
}
