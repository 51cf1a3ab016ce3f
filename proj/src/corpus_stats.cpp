#include "xgram/corpus_stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "xgram/error.hpp"
#include "xgram/io.hpp"
#include "xgram/rng.hpp"

namespace xgram::stats {

namespace {

void fill_probs(FrequencyTable& freq) {
  freq.probs.assign(freq.vocab_size, 0.0);
  if (freq.total == 0) return;
  const double inv = 1.0 / static_cast<double>(freq.total);
  for (std::size_t i = 0; i < freq.vocab_size; ++i)
    freq.probs[i] = static_cast<double>(freq.counts[i]) * inv;
}

void count_into(std::span<const TokenId> stream, std::size_t offset, std::size_t vocab_size,
                std::vector<std::uint64_t>& counts) {
  for (std::size_t i = 0; i < stream.size(); ++i) {
    const TokenId t = stream[i];
    if (t >= vocab_size) throw TokenRangeError(offset + i, t, vocab_size);
    ++counts[t];
  }
}

}  // namespace

FrequencyTable& FrequencyTable::operator+=(const FrequencyTable& other) {
  if (other.vocab_size != vocab_size)
    throw ValidationError("cannot merge frequency tables with different vocab sizes");
  for (std::size_t i = 0; i < vocab_size; ++i) counts[i] += other.counts[i];
  total += other.total;
  fill_probs(*this);
  return *this;
}

FrequencyTable make_frequency_table(std::vector<std::uint64_t> counts) {
  FrequencyTable freq;
  freq.vocab_size = counts.size();
  freq.counts = std::move(counts);
  for (const auto c : freq.counts) freq.total += c;
  fill_probs(freq);
  return freq;
}

FrequencyTable count_tokens(std::span<const TokenId> stream, std::size_t vocab_size) {
  if (vocab_size == 0) throw ValidationError("vocab_size must be positive");
  std::vector<std::uint64_t> counts(vocab_size, 0);
  count_into(stream, 0, vocab_size, counts);
  return make_frequency_table(std::move(counts));
}

FrequencyTable count_tokens_sharded(std::span<const TokenId> stream, std::size_t vocab_size,
                                    std::size_t shards) {
  if (vocab_size == 0) throw ValidationError("vocab_size must be positive");
  shards = std::clamp<std::size_t>(shards, 1, std::max<std::size_t>(1, stream.size()));
  if (shards == 1) return count_tokens(stream, vocab_size);

  const std::size_t chunk = (stream.size() + shards - 1) / shards;
  std::vector<std::vector<std::uint64_t>> partial(shards, std::vector<std::uint64_t>(vocab_size));
  std::vector<std::exception_ptr> failures(shards);
  {
    std::vector<std::jthread> workers;
    for (std::size_t s = 0; s < shards; ++s) {
      const std::size_t begin = std::min(stream.size(), s * chunk);
      const std::size_t end = std::min(stream.size(), begin + chunk);
      workers.emplace_back([&, s, begin, end] {
        try {
          count_into(stream.subspan(begin, end - begin), begin, vocab_size, partial[s]);
        } catch (...) {
          failures[s] = std::current_exception();
        }
      });
    }
  }
  // Report the earliest offending shard so the error matches the serial path.
  for (const auto& f : failures)
    if (f) std::rethrow_exception(f);

  std::vector<std::uint64_t> counts(vocab_size, 0);
  for (const auto& p : partial)
    for (std::size_t i = 0; i < vocab_size; ++i) counts[i] += p[i];
  return make_frequency_table(std::move(counts));
}

double effective_probability(const FrequencyTable& freq, TokenId token) {
  if (token >= freq.vocab_size) throw TokenRangeError(0, token, freq.vocab_size);
  if (freq.counts[token] > 0) return freq.probs[token];
  return 1.0 / static_cast<double>(freq.total + freq.vocab_size);
}

SmoothedMass smoothed_mass(const FrequencyTable& freq, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw ValidationError("smoothing exponent alpha must lie in (0, 1], got " +
                          std::to_string(alpha));
  SmoothedMass out;
  out.alpha = alpha;
  out.mass.resize(freq.vocab_size);
  for (std::size_t i = 0; i < freq.vocab_size; ++i) {
    const double p = effective_probability(freq, static_cast<TokenId>(i));
    out.mass[i] = alpha == 1.0 ? p : std::pow(p, alpha);
  }
  return out;
}

std::vector<double> zipf_cdf(std::size_t vocab_size, double exponent) {
  if (vocab_size == 0) throw ValidationError("vocab_size must be positive");
  if (!(exponent >= 0.0) || !std::isfinite(exponent))
    throw ValidationError("zipf exponent must be finite and non-negative");
  std::vector<double> cdf(vocab_size);
  double acc = 0.0;
  for (std::size_t i = 0; i < vocab_size; ++i) {
    acc += std::pow(static_cast<double>(i + 1), -exponent);
    cdf[i] = acc;
  }
  for (auto& c : cdf) c /= acc;
  cdf.back() = 1.0;
  return cdf;
}

TokenId sample_from_cdf(std::span<const double> cdf, double u) {
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  const auto idx = static_cast<std::size_t>(it - cdf.begin());
  return static_cast<TokenId>(std::min(idx, cdf.size() - 1));
}

std::vector<TokenId> zipf_stream(std::uint64_t seed, std::size_t vocab_size, double exponent,
                                 std::size_t length) {
  const auto cdf = zipf_cdf(vocab_size, exponent);
  SplitMix64 rng(seed);
  std::vector<TokenId> out(length);
  for (auto& t : out) t = sample_from_cdf(cdf, rng.uniform());
  return out;
}

std::string frequency_to_json(const FrequencyTable& freq) {
  nlohmann::json j;
  j["version"] = 1;
  j["vocab_size"] = freq.vocab_size;
  j["counts"] = freq.counts;
  return j.dump() + "\n";
}

FrequencyTable frequency_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("frequency table: ") + e.what());
  }
  if (!j.is_object() || !j.contains("version")) throw FormatError("frequency table: missing version");
  if (j["version"] != 1) throw VersionError("frequency table: unsupported version " + j["version"].dump());
  try {
    const auto vocab = j.at("vocab_size").get<std::size_t>();
    auto counts = j.at("counts").get<std::vector<std::uint64_t>>();
    if (counts.size() != vocab) throw FormatError("frequency table: counts length != vocab_size");
    return make_frequency_table(std::move(counts));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("frequency table: ") + e.what());
  }
}

IdsFormat parse_ids_format(const std::string& name) {
  if (name == "bin") return IdsFormat::kBinary;
  if (name == "txt") return IdsFormat::kText;
  throw ValidationError("unknown ids format '" + name + "' (expected bin or txt)");
}

std::vector<TokenId> read_token_ids(const std::filesystem::path& path, IdsFormat format) {
  if (format == IdsFormat::kBinary) {
    const auto bytes = io::read_file(path);
    if (bytes.size() % 4 != 0) throw FormatError(path.string() + ": size is not a multiple of 4");
    io::Reader r(bytes, path.string());
    return r.get_array<TokenId>(bytes.size() / 4);
  }
  std::istringstream in(io::read_text(path));
  std::vector<TokenId> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(line, &used);
      if (v > 0xFFFFFFFFULL) throw std::out_of_range("id");
      ids.push_back(static_cast<TokenId>(v));
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": line " + std::to_string(lineno) +
                        " is not a token id");
    }
  }
  return ids;
}

void write_token_ids(const std::filesystem::path& path, std::span<const TokenId> ids,
                     IdsFormat format) {
  if (format == IdsFormat::kBinary) {
    io::Writer w;
    w.put_array(ids);
    io::write_file(path, w.bytes());
    return;
  }
  std::string text;
  for (const auto id : ids) {
    text += std::to_string(id);
    text += '\n';
  }
  io::write_text(path, text);
}

}  // namespace xgram::stats
