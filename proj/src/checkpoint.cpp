#include "xgram/checkpoint.hpp"

#include <algorithm>
#include <cstring>

#include "xgram/error.hpp"

namespace xgram::checkpoint {

namespace {
constexpr char kMagic[8] = {'X', 'G', 'R', 'M', 'C', 'K', 'P', 'T'};
}

void Archive::put(std::string name, const Mat& m) {
  Tensor t;
  t.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.data.assign(m.data(), m.data() + m.size());
  tensors_.emplace_back(std::move(name), std::move(t));
}

void Archive::put(std::string name, const Vec& v) {
  Tensor t;
  t.shape = {static_cast<std::uint64_t>(v.size())};
  t.data.assign(v.data(), v.data() + v.size());
  tensors_.emplace_back(std::move(name), std::move(t));
}

void Archive::put_scalar(std::string name, double value) {
  tensors_.emplace_back(std::move(name), Tensor{{}, {value}});
}

bool Archive::contains(const std::string& name) const {
  return std::any_of(tensors_.begin(), tensors_.end(),
                     [&](const auto& kv) { return kv.first == name; });
}

const Tensor& Archive::get(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return t;
  throw FormatError("checkpoint: missing tensor '" + name + "'");
}

Mat Archive::get_mat(const std::string& name) const {
  const auto& t = get(name);
  if (t.shape.size() != 2) throw FormatError("checkpoint: tensor '" + name + "' is not a matrix");
  Mat m(static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
  std::copy(t.data.begin(), t.data.end(), m.data());
  return m;
}

Vec Archive::get_vec(const std::string& name) const {
  const auto& t = get(name);
  if (t.shape.size() != 1) throw FormatError("checkpoint: tensor '" + name + "' is not a vector");
  Vec v(static_cast<Eigen::Index>(t.shape[0]));
  std::copy(t.data.begin(), t.data.end(), v.data());
  return v;
}

double Archive::get_scalar(const std::string& name) const {
  const auto& t = get(name);
  if (!t.shape.empty() || t.data.size() != 1)
    throw FormatError("checkpoint: tensor '" + name + "' is not a scalar");
  return t.data[0];
}

io::Bytes Archive::serialize() const {
  io::Writer w;
  w.put_raw(std::string_view(kMagic, sizeof(kMagic)));
  w.put<std::uint32_t>(kVersion);
  w.put_string(meta);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors_.size()));
  for (const auto& [name, t] : tensors_) {
    w.put_string(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    w.put_array<std::uint64_t>(t.shape);
    w.put_array<double>(t.data);
  }
  w.put<std::uint64_t>(io::fnv1a64(w.bytes()));
  return w.take();
}

Archive Archive::deserialize(std::span<const std::uint8_t> bytes) {
  io::Reader head(bytes, "checkpoint");
  if (head.get_raw(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic))) head.fail("bad magic");
  const auto version = head.get<std::uint32_t>();
  if (version != kVersion)
    throw VersionError("checkpoint: unsupported version " + std::to_string(version));
  if (bytes.size() < head.position() + sizeof(std::uint64_t)) head.fail("truncated");
  const auto body = bytes.first(bytes.size() - sizeof(std::uint64_t));
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body.size(), sizeof(stored));
  if (io::fnv1a64(body) != stored) throw FormatError("checkpoint: checksum mismatch");

  io::Reader r(body, "checkpoint");
  r.get_raw(sizeof(kMagic) + sizeof(std::uint32_t));
  Archive a;
  a.meta = r.get_string();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.get_string();
    Tensor t;
    t.shape = r.get_array<std::uint64_t>(r.get<std::uint32_t>());
    std::uint64_t n = 1;
    for (const auto d : t.shape) n *= d;
    t.data = r.get_array<double>(n);
    a.tensors_.emplace_back(std::move(name), std::move(t));
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  return a;
}

}  // namespace xgram::checkpoint
