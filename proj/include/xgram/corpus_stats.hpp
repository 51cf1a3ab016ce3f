#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace xgram::stats {

using TokenId = std::uint32_t;

// Per-token occurrence counts over a fixed vocabulary.
struct FrequencyTable {
  std::size_t vocab_size = 0;
  std::vector<std::uint64_t> counts;
  std::uint64_t total = 0;
  std::vector<double> probs;  // counts / total, all zero when total == 0

  // Element-wise sum; both tables must share vocab_size.
  FrequencyTable& operator+=(const FrequencyTable& other);
  friend bool operator==(const FrequencyTable&, const FrequencyTable&) = default;
};

// s(w) = p_eff(w)^alpha, where unseen tokens get p_eff = 1 / (total + vocab_size).
struct SmoothedMass {
  double alpha = 0.5;
  std::vector<double> mass;
};

FrequencyTable count_tokens(std::span<const TokenId> stream, std::size_t vocab_size);

// Splits the stream into `shards` contiguous pieces, counts each on its own
// thread and merges in shard order. Result is identical to count_tokens.
FrequencyTable count_tokens_sharded(std::span<const TokenId> stream, std::size_t vocab_size,
                                    std::size_t shards);

FrequencyTable make_frequency_table(std::vector<std::uint64_t> counts);

// Probability used for smoothing: the empirical one, or the floor for zero counts.
double effective_probability(const FrequencyTable& freq, TokenId token);

SmoothedMass smoothed_mass(const FrequencyTable& freq, double alpha);

// Draws `length` tokens with P(w) proportional to (w + 1)^(-exponent) by
// inverse CDF over a cumulative table, driven by SplitMix64(seed).
std::vector<TokenId> zipf_stream(std::uint64_t seed, std::size_t vocab_size, double exponent,
                                 std::size_t length);

// Cumulative Zipf distribution; cdf.back() == 1.
std::vector<double> zipf_cdf(std::size_t vocab_size, double exponent);
TokenId sample_from_cdf(std::span<const double> cdf, double u);

// {"version":1,"vocab_size":N,"counts":[...]}
std::string frequency_to_json(const FrequencyTable& freq);
FrequencyTable frequency_from_json(const std::string& text);

enum class IdsFormat { kBinary, kText };

IdsFormat parse_ids_format(const std::string& name);
std::vector<TokenId> read_token_ids(const std::filesystem::path& path, IdsFormat format);
void write_token_ids(const std::filesystem::path& path, std::span<const TokenId> ids,
                     IdsFormat format);

}  // namespace xgram::stats
