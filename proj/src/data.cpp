#include "xgram/data.hpp"

#include <cmath>
#include <numeric>

#include "xgram/error.hpp"
#include "xgram/rng.hpp"

namespace xgram::data {

namespace {

constexpr std::uint64_t kTrainDomain = 0x7472616eULL;
constexpr std::uint64_t kValidDomain = 0x76616c69ULL;
constexpr std::uint64_t kSuccessorDomain = 0x73756363ULL;

std::uint64_t sequence_seed(std::uint64_t seed, bool validation, std::uint64_t index) {
  return mix_combine(mix_combine(seed, validation ? kValidDomain : kTrainDomain), index);
}

}  // namespace

void MarkovConfig::validate() const {
  if (vocab_size < 2) throw ValidationError("markov source needs at least two tokens");
  if (lag_weights.empty()) throw ValidationError("markov source needs at least one lag");
  if (!(noise >= 0.0 && noise <= 1.0)) throw ValidationError("noise must lie in [0, 1]");
  double sum = 0.0;
  for (const auto w : lag_weights) {
    if (!(w >= 0.0)) throw ValidationError("lag weights must be non-negative");
    sum += w;
  }
  if (!(sum > 0.0)) throw ValidationError("lag weights must not all be zero");
}

MarkovSource::MarkovSource(MarkovConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  cdf_ = stats::zipf_cdf(cfg_.vocab_size, cfg_.zipf_exponent);
  const double total = std::accumulate(cfg_.lag_weights.begin(), cfg_.lag_weights.end(), 0.0);
  double acc = 0.0;
  for (const auto w : cfg_.lag_weights) {
    acc += w / total;
    lag_cdf_.push_back(acc);
  }
  lag_cdf_.back() = 1.0;
  successors_.resize(cfg_.order() * cfg_.vocab_size);
  for (std::size_t lag = 0; lag < cfg_.order(); ++lag)
    for (std::size_t t = 0; t < cfg_.vocab_size; ++t) {
      const std::uint64_t key = mix_combine(mix_combine(cfg_.seed, kSuccessorDomain + lag), t);
      const double u = static_cast<double>(key >> 11) * 0x1.0p-53;
      successors_[lag * cfg_.vocab_size + t] = stats::sample_from_cdf(cdf_, u);
    }
}

TokenId MarkovSource::successor(std::size_t lag, TokenId token) const {
  return successors_[lag * cfg_.vocab_size + token];
}

void MarkovSource::sequence(bool validation, std::uint64_t index, std::span<TokenId> out) const {
  SplitMix64 rng(sequence_seed(cfg_.seed, validation, index));
  for (std::size_t t = 0; t < out.size(); ++t) {
    const double u = rng.uniform();
    const double v = rng.uniform();
    if (t == 0 || u < cfg_.noise) {
      out[t] = stats::sample_from_cdf(cdf_, v);
      continue;
    }
    const auto lag = static_cast<std::size_t>(stats::sample_from_cdf(lag_cdf_, v));
    // Lags reaching before the sequence start fall back to the oldest token.
    const std::size_t src = lag + 1 <= t ? t - 1 - lag : 0;
    out[t] = successor(lag, out[src]);
  }
}

ZipfSource::ZipfSource(std::size_t vocab_size, double exponent, std::uint64_t seed)
    : vocab_(vocab_size), cdf_(stats::zipf_cdf(vocab_size, exponent)), seed_(seed) {}

void ZipfSource::sequence(bool validation, std::uint64_t index, std::span<TokenId> out) const {
  SplitMix64 rng(sequence_seed(seed_, validation, index));
  for (auto& t : out) t = stats::sample_from_cdf(cdf_, rng.uniform());
}

StreamSource::StreamSource(std::vector<TokenId> tokens, std::size_t vocab_size, std::uint64_t seed,
                           double validation_fraction)
    : tokens_(std::move(tokens)), vocab_(vocab_size), seed_(seed) {
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    if (tokens_[i] >= vocab_) throw TokenRangeError(i, tokens_[i], vocab_);
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
    throw ValidationError("validation fraction must lie in (0, 1)");
  split_ = static_cast<std::size_t>(static_cast<double>(tokens_.size()) * (1.0 - validation_fraction));
}

void StreamSource::sequence(bool validation, std::uint64_t index, std::span<TokenId> out) const {
  const std::size_t begin = validation ? split_ : 0;
  const std::size_t end = validation ? tokens_.size() : split_;
  if (end - begin < out.size())
    throw ValidationError("token stream too short for the requested sequence length");
  SplitMix64 rng(sequence_seed(seed_, validation, index));
  const std::size_t span = end - begin - out.size() + 1;
  const std::size_t start = begin + static_cast<std::size_t>(rng.next() % span);
  std::copy_n(tokens_.begin() + static_cast<std::ptrdiff_t>(start), out.size(), out.begin());
}

std::vector<TokenId> sample_tokens(const Source& source, std::size_t count, std::size_t seq_len) {
  if (seq_len == 0) throw ValidationError("sequence length must be positive");
  constexpr std::uint64_t kStatsIndexBase = 1ULL << 48;
  std::vector<TokenId> out(count);
  std::vector<TokenId> buf(seq_len);
  std::size_t filled = 0;
  for (std::uint64_t i = 0; filled < count; ++i) {
    source.sequence(false, kStatsIndexBase + i, buf);
    const std::size_t n = std::min(seq_len, count - filled);
    std::copy_n(buf.begin(), n, out.begin() + static_cast<std::ptrdiff_t>(filled));
    filled += n;
  }
  return out;
}

}  // namespace xgram::data
