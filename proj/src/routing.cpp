#include "xgram/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <unordered_map>

#include "xgram/error.hpp"
#include "xgram/rng.hpp"

namespace xgram::routing {

namespace {

constexpr char kPlanMagic[8] = {'X', 'G', 'R', 'M', 'P', 'L', 'A', 'N'};

enum class ElemCode : std::uint32_t { kU8 = 1, kU32 = 2, kU64 = 3, kF64 = 4 };

enum class Tag : std::uint32_t {
  kConfigInts = 1,
  kConfigReals = 2,
  kDims = 3,
  kVipTokens = 4,
  kBucketOf = 5,
  kBucketBegin = 6,
  kBucketDense = 7,
  kDirectRow = 8,
  kAliasOffsets = 9,
  kAliasRows = 10,
  kHashMultipliers = 11,
};

constexpr std::uint32_t kNumTags = 11;

std::uint64_t bucket_multiplier(std::uint64_t seed, std::uint64_t bucket, std::uint64_t path) {
  return mix64(mix_combine(mix_combine(seed, bucket), path)) | 1ULL;
}

void add_entry(std::vector<AccessEntry>& entries, RowIndex row, double coeff) {
  for (auto& e : entries) {
    if (e.row == row) {
      e.coeff += coeff;
      return;
    }
  }
  entries.push_back({row, coeff});
}

}  // namespace

const char* origin_name(Origin origin) {
  switch (origin) {
    case Origin::kVip: return "vip";
    case Origin::kSparseDirect: return "sparse-direct";
    case Origin::kSparseAlias: return "sparse-alias";
    case Origin::kDenseHash: return "dense-hash";
  }
  return "unknown";
}

void RoutingConfig::validate() const {
  if (!(rho > 0.0 && rho <= 1.0)) throw ValidationError("rho must lie in (0, 1]");
  if (num_buckets < 1) throw ValidationError("num_buckets must be at least 1");
  if (hash_paths < 1) throw ValidationError("hash_paths must be at least 1");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in (0, 1]");
  if (!(decay > 0.0 && decay <= 1.0)) throw ValidationError("decay must lie in (0, 1]");
}

std::vector<TokenId> rank_tokens(const stats::FrequencyTable& freq) {
  std::vector<TokenId> order(freq.vocab_size);
  std::iota(order.begin(), order.end(), TokenId{0});
  std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
    return freq.counts[a] > freq.counts[b];
  });
  return order;
}

std::vector<TokenId> select_vip(const stats::FrequencyTable& freq, std::size_t k_vip) {
  if (k_vip > freq.vocab_size)
    throw ValidationError("k_vip (" + std::to_string(k_vip) + ") exceeds vocabulary size (" +
                          std::to_string(freq.vocab_size) + ")");
  auto order = rank_tokens(freq);
  order.resize(k_vip);
  return order;
}

BucketPartition partition_buckets(std::span<const double> ordered_mass, std::size_t num_buckets) {
  if (num_buckets < 1) throw ValidationError("num_buckets must be at least 1");
  const std::size_t n = ordered_mass.size();
  if (n < num_buckets)
    throw ValidationError("cannot split " + std::to_string(n) + " tokens into " +
                          std::to_string(num_buckets) + " non-empty buckets");

  const double total = std::accumulate(ordered_mass.begin(), ordered_mass.end(), 0.0);
  BucketPartition out;
  out.boundaries.assign(num_buckets + 1, 0);
  out.bucket_mass.assign(num_buckets, 0.0);

  // Tolerance absorbs rounding in the running sum when a cut lands exactly on a target.
  constexpr double kRelTol = 1e-12;
  double cumulative = 0.0;
  std::size_t i = 0;
  for (std::size_t b = 0; b + 1 < num_buckets; ++b) {
    const double target = total * static_cast<double>(b + 1) / static_cast<double>(num_buckets);
    const std::size_t must_leave = num_buckets - 1 - b;
    do {
      cumulative += ordered_mass[i];
      out.bucket_mass[b] += ordered_mass[i];
      ++i;
    } while (cumulative < target * (1.0 - kRelTol) && n - i > must_leave);
    out.boundaries[b + 1] = i;
  }
  for (; i < n; ++i) out.bucket_mass[num_buckets - 1] += ordered_mass[i];
  out.boundaries[num_buckets] = n;

  const double mean = total / static_cast<double>(num_buckets);
  const double max_mass = *std::max_element(out.bucket_mass.begin(), out.bucket_mass.end());
  out.max_over_mean = mean > 0.0 ? max_mass / mean : 0.0;
  return out;
}

RoutingPlan build_plan(const stats::FrequencyTable& freq, const RoutingConfig& cfg) {
  cfg.validate();
  const std::size_t vocab = freq.vocab_size;
  if (vocab < cfg.k_vip + cfg.num_buckets)
    throw ValidationError("vocabulary of " + std::to_string(vocab) +
                          " tokens is smaller than k_vip + num_buckets");
  const auto rows = static_cast<std::size_t>(std::llround(cfg.rho * static_cast<double>(vocab)));
  if (cfg.k_vip >= rows)
    throw ValidationError("rho too small: " + std::to_string(rows) +
                          " physical rows cannot hold the VIP region of " +
                          std::to_string(cfg.k_vip));
  const std::size_t body_rows = rows - cfg.k_vip;
  if (body_rows < cfg.num_buckets)
    throw ValidationError("body region of " + std::to_string(body_rows) +
                          " rows cannot give every bucket a row");
  if (rows > std::numeric_limits<RowIndex>::max() - 1)
    throw ValidationError("physical row count exceeds 32-bit row index range");

  RoutingPlan plan;
  plan.config = cfg;
  plan.vocab_size = vocab;
  plan.physical_rows = rows;

  const auto ranked = rank_tokens(freq);
  plan.vip_tokens.assign(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(cfg.k_vip));
  const std::span<const TokenId> body(ranked.data() + cfg.k_vip, vocab - cfg.k_vip);

  const auto mass = stats::smoothed_mass(freq, cfg.alpha);
  std::vector<double> body_mass(body.size());
  for (std::size_t i = 0; i < body.size(); ++i) body_mass[i] = mass.mass[body[i]];
  const auto partition = partition_buckets(body_mass, cfg.num_buckets);

  const std::size_t B = cfg.num_buckets;
  std::vector<std::size_t> bucket_rows(B);
  if (body_rows >= body.size()) {
    // Enough capacity for every token: size each bucket to its token count and
    // spread the surplus, so every bucket is sparse and rho = 1 is a bijection.
    const std::size_t surplus = body_rows - body.size();
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t tokens = partition.boundaries[b + 1] - partition.boundaries[b];
      bucket_rows[b] = tokens + surplus / B + (b >= B - surplus % B ? 1 : 0);
    }
  } else {
    const std::size_t base = body_rows / B;
    const std::size_t extra = body_rows % B;
    for (std::size_t b = 0; b < B; ++b) bucket_rows[b] = base + (b >= B - extra ? 1 : 0);
  }

  plan.bucket_begin.resize(B + 1);
  plan.bucket_begin[0] = static_cast<RowIndex>(cfg.k_vip);
  for (std::size_t b = 0; b < B; ++b)
    plan.bucket_begin[b + 1] = plan.bucket_begin[b] + static_cast<RowIndex>(bucket_rows[b]);

  plan.bucket_of.assign(vocab, kNoBucket);
  plan.direct_row.assign(vocab, kNoRow);
  plan.bucket_dense.assign(B, 0);
  for (std::size_t i = 0; i < cfg.k_vip; ++i)
    plan.direct_row[plan.vip_tokens[i]] = static_cast<RowIndex>(i);

  std::vector<RowIndex> alias_pool;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t first = partition.boundaries[b];
    const std::size_t tokens = partition.boundaries[b + 1] - first;
    const bool dense = tokens > bucket_rows[b];
    plan.bucket_dense[b] = dense ? 1 : 0;
    for (std::size_t j = 0; j < tokens; ++j) {
      const TokenId t = body[first + j];
      plan.bucket_of[t] = static_cast<std::uint32_t>(b);
      if (!dense) plan.direct_row[t] = plan.bucket_begin[b] + static_cast<RowIndex>(j);
    }
    if (!dense)
      for (std::size_t r = tokens; r < bucket_rows[b]; ++r)
        alias_pool.push_back(plan.bucket_begin[b] + static_cast<RowIndex>(r));
  }

  plan.hash_multipliers.resize(B * cfg.hash_paths);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < cfg.hash_paths; ++h)
      plan.hash_multipliers[b * cfg.hash_paths + h] = bucket_multiplier(cfg.plan_seed, b, h);

  // Recycled rows go round-robin to sparse-bucket tokens in global mass order:
  // pass c hands out the c-th extra path, until the pool or the cap runs out.
  std::vector<TokenId> recipients;
  for (const TokenId t : body)
    if (!plan.bucket_dense[plan.bucket_of[t]]) recipients.push_back(t);
  std::vector<std::vector<RowIndex>> aliases(vocab);
  std::size_t next = 0;
  for (std::size_t pass = 0; pass < cfg.max_extra_paths && next < alias_pool.size(); ++pass)
    for (const TokenId t : recipients) {
      if (next == alias_pool.size()) break;
      aliases[t].push_back(alias_pool[next++]);
    }

  plan.alias_offsets.assign(vocab + 1, 0);
  for (std::size_t t = 0; t < vocab; ++t)
    plan.alias_offsets[t + 1] = plan.alias_offsets[t] + static_cast<std::uint32_t>(aliases[t].size());
  plan.alias_rows.reserve(plan.alias_offsets[vocab]);
  for (const auto& a : aliases) plan.alias_rows.insert(plan.alias_rows.end(), a.begin(), a.end());
  return plan;
}

RowIndex hash_row(const RoutingPlan& plan, std::uint32_t bucket, std::size_t path, TokenId token) {
  const std::uint64_t mult = plan.hash_multipliers[bucket * plan.config.hash_paths + path];
  const RowIndex begin = plan.bucket_begin[bucket];
  const std::uint64_t span = plan.bucket_begin[bucket + 1] - begin;
  const std::uint64_t h = (mix64(token) * mult) >> 32;
  return begin + static_cast<RowIndex>(h % span);
}

std::vector<double> slot_weights(std::size_t extra_paths, double decay) {
  std::vector<double> pi(extra_paths + 1);
  double sum = 0.0;
  double w = 1.0;
  for (auto& p : pi) {
    p = w;
    sum += w;
    w *= decay;
  }
  for (auto& p : pi) p /= sum;
  return pi;
}

AccessList access_list(const RoutingPlan& plan, TokenId token) {
  if (token >= plan.vocab_size)
    throw TokenRangeError(0, token, static_cast<std::size_t>(plan.vocab_size));
  AccessList out;
  const std::uint32_t bucket = plan.bucket_of[token];
  const std::uint32_t alias_begin = plan.alias_offsets[token];
  const std::size_t extra = plan.alias_offsets[token + 1] - alias_begin;
  const auto pi = slot_weights(extra, plan.config.decay);

  if (bucket == kNoBucket) {
    out.origin = Origin::kVip;
    add_entry(out.entries, plan.direct_row[token], pi[0]);
  } else if (plan.bucket_dense[bucket]) {
    out.origin = Origin::kDenseHash;
    // Paths within one slot are summed without a 1/H factor.
    for (std::size_t h = 0; h < plan.config.hash_paths; ++h)
      add_entry(out.entries, hash_row(plan, bucket, h, token), pi[0]);
  } else {
    out.origin = extra > 0 ? Origin::kSparseAlias : Origin::kSparseDirect;
    add_entry(out.entries, plan.direct_row[token], pi[0]);
  }
  for (std::size_t c = 0; c < extra; ++c)
    add_entry(out.entries, plan.alias_rows[alias_begin + c], pi[c + 1]);
  return out;
}

std::vector<RowIndex> reachable_rows(const RoutingPlan& plan) {
  std::vector<std::uint8_t> seen(plan.physical_rows, 0);
  for (std::uint64_t t = 0; t < plan.vocab_size; ++t)
    for (const auto& e : access_list(plan, static_cast<TokenId>(t)).entries) seen[e.row] = 1;
  std::vector<RowIndex> rows;
  for (std::size_t r = 0; r < seen.size(); ++r)
    if (seen[r]) rows.push_back(static_cast<RowIndex>(r));
  return rows;
}

void validate_plan(const RoutingPlan& plan) {
  const auto fail = [](const std::string& msg) { throw FormatError("routing plan: " + msg); };
  const auto& cfg = plan.config;
  try {
    cfg.validate();
  } catch (const ValidationError& e) {
    fail(e.what());
  }
  const std::size_t vocab = plan.vocab_size;
  const std::size_t B = cfg.num_buckets;
  if (plan.physical_rows == 0 || plan.physical_rows > std::numeric_limits<RowIndex>::max() - 1)
    fail("physical row count out of range");
  if (cfg.k_vip >= plan.physical_rows) fail("VIP region exceeds table");
  if (plan.vip_tokens.size() != cfg.k_vip) fail("VIP list length mismatch");
  if (plan.bucket_of.size() != vocab || plan.direct_row.size() != vocab ||
      plan.alias_offsets.size() != vocab + 1)
    fail("per-token array length mismatch");
  if (plan.bucket_begin.size() != B + 1 || plan.bucket_dense.size() != B)
    fail("per-bucket array length mismatch");
  if (plan.hash_multipliers.size() != B * cfg.hash_paths) fail("hash parameter count mismatch");
  if (plan.bucket_begin.front() != cfg.k_vip || plan.bucket_begin.back() != plan.physical_rows)
    fail("bucket ranges do not cover the body region");
  for (std::size_t b = 0; b < B; ++b)
    if (plan.bucket_begin[b + 1] <= plan.bucket_begin[b]) fail("empty or inverted bucket range");
  for (const auto m : plan.hash_multipliers)
    if ((m & 1ULL) == 0) fail("hash multiplier must be odd");

  std::vector<std::uint8_t> is_vip(vocab, 0);
  for (std::size_t i = 0; i < plan.vip_tokens.size(); ++i) {
    const TokenId t = plan.vip_tokens[i];
    if (t >= vocab || is_vip[t]) fail("invalid or duplicate VIP token");
    is_vip[t] = 1;
    if (plan.direct_row[t] != i || plan.bucket_of[t] != kNoBucket) fail("VIP row mismatch");
  }
  if (plan.alias_offsets.front() != 0 || plan.alias_offsets.back() != plan.alias_rows.size())
    fail("alias offsets inconsistent");
  for (std::size_t t = 0; t < vocab; ++t) {
    if (plan.alias_offsets[t + 1] < plan.alias_offsets[t]) fail("alias offsets not monotone");
    if (plan.alias_offsets[t + 1] - plan.alias_offsets[t] > cfg.max_extra_paths)
      fail("token exceeds extra path cap");
    if (is_vip[t]) continue;
    const auto b = plan.bucket_of[t];
    if (b >= B) fail("non-VIP token without bucket");
    if (plan.bucket_dense[b]) {
      if (plan.direct_row[t] != kNoRow) fail("dense token with direct row");
    } else if (plan.direct_row[t] < plan.bucket_begin[b] ||
               plan.direct_row[t] >= plan.bucket_begin[b + 1]) {
      fail("sparse token row outside its bucket");
    }
  }
  for (const auto r : plan.alias_rows)
    if (r < cfg.k_vip || r >= plan.physical_rows) fail("alias row out of body region");
}

io::Bytes serialize_plan(const RoutingPlan& plan) {
  const auto& c = plan.config;
  const std::vector<std::uint64_t> ints{c.k_vip, c.num_buckets, c.hash_paths, c.max_extra_paths,
                                        c.plan_seed};
  const std::vector<double> reals{c.rho, c.alpha, c.decay};
  const std::vector<std::uint64_t> dims{plan.vocab_size, plan.physical_rows};

  struct Field {
    Tag tag;
    ElemCode code;
    std::uint64_t count;
  };
  const Field fields[kNumTags] = {
      {Tag::kConfigInts, ElemCode::kU64, ints.size()},
      {Tag::kConfigReals, ElemCode::kF64, reals.size()},
      {Tag::kDims, ElemCode::kU64, dims.size()},
      {Tag::kVipTokens, ElemCode::kU32, plan.vip_tokens.size()},
      {Tag::kBucketOf, ElemCode::kU32, plan.bucket_of.size()},
      {Tag::kBucketBegin, ElemCode::kU32, plan.bucket_begin.size()},
      {Tag::kBucketDense, ElemCode::kU8, plan.bucket_dense.size()},
      {Tag::kDirectRow, ElemCode::kU32, plan.direct_row.size()},
      {Tag::kAliasOffsets, ElemCode::kU32, plan.alias_offsets.size()},
      {Tag::kAliasRows, ElemCode::kU32, plan.alias_rows.size()},
      {Tag::kHashMultipliers, ElemCode::kU64, plan.hash_multipliers.size()},
  };

  io::Writer w;
  w.put_raw(std::string_view(kPlanMagic, sizeof(kPlanMagic)));
  w.put<std::uint32_t>(kPlanVersion);
  w.put<std::uint32_t>(kNumTags);
  for (const auto& f : fields) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(f.tag));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(f.code));
    w.put<std::uint64_t>(f.count);
  }
  w.put_array<std::uint64_t>(ints);
  w.put_array<double>(reals);
  w.put_array<std::uint64_t>(dims);
  w.put_array<TokenId>(plan.vip_tokens);
  w.put_array<std::uint32_t>(plan.bucket_of);
  w.put_array<RowIndex>(plan.bucket_begin);
  w.put_array<std::uint8_t>(plan.bucket_dense);
  w.put_array<RowIndex>(plan.direct_row);
  w.put_array<std::uint32_t>(plan.alias_offsets);
  w.put_array<RowIndex>(plan.alias_rows);
  w.put_array<std::uint64_t>(plan.hash_multipliers);
  w.put<std::uint64_t>(io::fnv1a64(w.bytes()));
  return w.take();
}

RoutingPlan deserialize_plan(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes, "routing plan");
  if (r.get_raw(sizeof(kPlanMagic)) != std::string_view(kPlanMagic, sizeof(kPlanMagic)))
    r.fail("bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kPlanVersion)
    throw VersionError("routing plan: unsupported version " + std::to_string(version));
  if (bytes.size() < sizeof(std::uint64_t) + r.position()) r.fail("truncated");
  const auto body = bytes.first(bytes.size() - sizeof(std::uint64_t));
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body.size(), sizeof(stored));
  if (io::fnv1a64(body) != stored) throw FormatError("routing plan: checksum mismatch");

  io::Reader rb(body, "routing plan");
  rb.get_raw(sizeof(kPlanMagic) + sizeof(std::uint32_t));
  const auto nfields = rb.get<std::uint32_t>();
  if (nfields != kNumTags) rb.fail("unexpected field count");

  struct Field {
    std::uint32_t tag, code;
    std::uint64_t count;
  };
  std::vector<Field> fields(nfields);
  for (auto& f : fields) {
    f.tag = rb.get<std::uint32_t>();
    f.code = rb.get<std::uint32_t>();
    f.count = rb.get<std::uint64_t>();
  }
  const auto expect = [&](std::size_t i, Tag tag, ElemCode code) {
    if (fields[i].tag != static_cast<std::uint32_t>(tag) ||
        fields[i].code != static_cast<std::uint32_t>(code))
      rb.fail("field table entry " + std::to_string(i) + " has unexpected tag or type");
    return fields[i].count;
  };

  RoutingPlan plan;
  const auto ints = rb.get_array<std::uint64_t>(expect(0, Tag::kConfigInts, ElemCode::kU64));
  const auto reals = rb.get_array<double>(expect(1, Tag::kConfigReals, ElemCode::kF64));
  const auto dims = rb.get_array<std::uint64_t>(expect(2, Tag::kDims, ElemCode::kU64));
  if (ints.size() != 5 || reals.size() != 3 || dims.size() != 2) rb.fail("bad header arrays");
  plan.config.k_vip = ints[0];
  plan.config.num_buckets = ints[1];
  plan.config.hash_paths = ints[2];
  plan.config.max_extra_paths = ints[3];
  plan.config.plan_seed = ints[4];
  plan.config.rho = reals[0];
  plan.config.alpha = reals[1];
  plan.config.decay = reals[2];
  plan.vocab_size = dims[0];
  plan.physical_rows = dims[1];
  plan.vip_tokens = rb.get_array<TokenId>(expect(3, Tag::kVipTokens, ElemCode::kU32));
  plan.bucket_of = rb.get_array<std::uint32_t>(expect(4, Tag::kBucketOf, ElemCode::kU32));
  plan.bucket_begin = rb.get_array<RowIndex>(expect(5, Tag::kBucketBegin, ElemCode::kU32));
  plan.bucket_dense = rb.get_array<std::uint8_t>(expect(6, Tag::kBucketDense, ElemCode::kU8));
  plan.direct_row = rb.get_array<RowIndex>(expect(7, Tag::kDirectRow, ElemCode::kU32));
  plan.alias_offsets = rb.get_array<std::uint32_t>(expect(8, Tag::kAliasOffsets, ElemCode::kU32));
  plan.alias_rows = rb.get_array<RowIndex>(expect(9, Tag::kAliasRows, ElemCode::kU32));
  plan.hash_multipliers =
      rb.get_array<std::uint64_t>(expect(10, Tag::kHashMultipliers, ElemCode::kU64));
  if (rb.remaining() != 0) rb.fail("trailing bytes after payload");
  validate_plan(plan);
  return plan;
}

AccessIndex::AccessIndex(const RoutingPlan& plan) : physical_rows_(plan.physical_rows) {
  offsets_.reserve(plan.vocab_size + 1);
  offsets_.push_back(0);
  origins_.reserve(plan.vocab_size);
  for (std::uint64_t t = 0; t < plan.vocab_size; ++t) {
    auto list = access_list(plan, static_cast<TokenId>(t));
    max_entries_ = std::max(max_entries_, list.entries.size());
    entries_.insert(entries_.end(), list.entries.begin(), list.entries.end());
    offsets_.push_back(static_cast<std::uint32_t>(entries_.size()));
    origins_.push_back(list.origin);
  }
}

}  // namespace xgram::routing
