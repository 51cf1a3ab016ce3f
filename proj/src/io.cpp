#include "xgram/io.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

namespace xgram::io {

std::uint64_t fnv1a64(std::span<const std::uint8_t> data, std::uint64_t seed) noexcept {
  std::uint64_t h = seed;
  for (const auto byte : data) {
    h ^= byte;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(std::string_view text) noexcept {
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return data;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void begin_artifact(Writer& w, std::string_view magic, std::uint32_t version) {
  w.put_raw(magic);
  w.put<std::uint32_t>(version);
}

Bytes finish_artifact(Writer& w) {
  w.put<std::uint64_t>(fnv1a64(w.bytes()));
  return w.take();
}

Reader open_artifact(std::span<const std::uint8_t> bytes, std::string_view magic,
                     std::uint32_t version, const std::string& what) {
  Reader head(bytes, what);
  if (head.get_raw(magic.size()) != magic) head.fail("bad magic");
  const auto found = head.get<std::uint32_t>();
  if (found != version)
    throw VersionError(what + ": unsupported version " + std::to_string(found));
  if (bytes.size() < head.position() + sizeof(std::uint64_t)) head.fail("truncated");
  const auto body = bytes.first(bytes.size() - sizeof(std::uint64_t));
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body.size(), sizeof(stored));
  if (fnv1a64(body) != stored) throw FormatError(what + ": checksum mismatch");
  Reader r(body, what);
  r.get_raw(magic.size() + sizeof(std::uint32_t));
  return r;
}

}  // namespace xgram::io
