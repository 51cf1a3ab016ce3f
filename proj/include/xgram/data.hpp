#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "xgram/corpus_stats.hpp"

namespace xgram::data {

using stats::TokenId;

// Hidden k-gram Markov source over a Zipf-marginal vocabulary.
//
// With probability `noise` the next token is a fresh Zipf draw. Otherwise a
// hidden lag j in [0, order) is picked with weight lag_weights[j], and the next
// token is succ_j(x_{t-j}), where each successor map succ_j is a fixed random
// function whose image is itself Zipf-distributed.
struct MarkovConfig {
  std::size_t vocab_size = 1024;
  double zipf_exponent = 1.1;
  double noise = 0.25;
  std::vector<double> lag_weights{0.45, 0.35, 0.2};
  std::uint64_t seed = 7;

  std::size_t order() const { return lag_weights.size(); }
  void validate() const;
};

// Produces token sequences for training and evaluation. Every call is a pure
// function of (kind, index), so batch order never depends on timing.
class Source {
 public:
  virtual ~Source() = default;
  virtual std::size_t vocab_size() const = 0;
  // Fills `out` with the `index`-th sequence of the given split.
  virtual void sequence(bool validation, std::uint64_t index, std::span<TokenId> out) const = 0;
};

class MarkovSource final : public Source {
 public:
  explicit MarkovSource(MarkovConfig cfg);

  std::size_t vocab_size() const override { return cfg_.vocab_size; }
  void sequence(bool validation, std::uint64_t index, std::span<TokenId> out) const override;
  TokenId successor(std::size_t lag, TokenId token) const;
  const MarkovConfig& config() const { return cfg_; }

 private:
  MarkovConfig cfg_;
  std::vector<double> cdf_;
  std::vector<double> lag_cdf_;
  std::vector<TokenId> successors_;  // [lag * vocab + token]
};

// i.i.d. Zipf tokens, no sequential structure.
class ZipfSource final : public Source {
 public:
  ZipfSource(std::size_t vocab_size, double exponent, std::uint64_t seed);

  std::size_t vocab_size() const override { return vocab_; }
  void sequence(bool validation, std::uint64_t index, std::span<TokenId> out) const override;

 private:
  std::size_t vocab_;
  std::vector<double> cdf_;
  std::uint64_t seed_;
};

// Windows cut from a fixed token stream; the last `validation_fraction` of the
// stream is held out for validation.
class StreamSource final : public Source {
 public:
  StreamSource(std::vector<TokenId> tokens, std::size_t vocab_size, std::uint64_t seed,
               double validation_fraction = 0.1);

  std::size_t vocab_size() const override { return vocab_; }
  void sequence(bool validation, std::uint64_t index, std::span<TokenId> out) const override;

 private:
  std::vector<TokenId> tokens_;
  std::size_t vocab_;
  std::uint64_t seed_;
  std::size_t split_;
};

// Concatenation of `count` tokens drawn from training sequences of length
// `seq_len`, starting at a dedicated index range so it never overlaps a batch.
std::vector<TokenId> sample_tokens(const Source& source, std::size_t count, std::size_t seq_len);

}  // namespace xgram::data
