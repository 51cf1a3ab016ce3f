#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "xgram/error.hpp"

namespace xgram::io {

static_assert(std::endian::native == std::endian::little,
              "binary artifact formats assume a little-endian host");

using Bytes = std::vector<std::uint8_t>;

// 64-bit FNV-1a. Used for artifact checksums and content-hash cache keys.
std::uint64_t fnv1a64(std::span<const std::uint8_t> data,
                      std::uint64_t seed = 0xcbf29ce484222325ULL) noexcept;
std::uint64_t fnv1a64(std::string_view text) noexcept;
std::string hex64(std::uint64_t value);

Bytes read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data);
void write_text(const std::filesystem::path& path, std::string_view text);

class Writer {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    const auto offset = buf_.size();
    buf_.resize(offset + sizeof(T));
    std::memcpy(buf_.data() + offset, &value, sizeof(T));
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put_array(std::span<const T> values) {
    const auto offset = buf_.size();
    buf_.resize(offset + values.size_bytes());
    if (!values.empty()) std::memcpy(buf_.data() + offset, values.data(), values.size_bytes());
  }

  void put_raw(std::string_view bytes) {
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
  }

  // u32 length prefix followed by the characters.
  void put_string(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_raw(s);
  }

  const Bytes& bytes() const noexcept { return buf_; }
  Bytes take() noexcept { return std::move(buf_); }
  std::size_t size() const noexcept { return buf_.size(); }

 private:
  Bytes buf_;
};

// Bounds-checked reader; every overrun throws FormatError naming `what`.
class Reader {
 public:
  Reader(std::span<const std::uint8_t> data, std::string what)
      : data_(data), what_(std::move(what)) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    require(sizeof(T));
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  std::vector<T> get_array(std::uint64_t count) {
    if (count > (data_.size() - pos_) / sizeof(T)) fail("array extends past end of data");
    std::vector<T> out(static_cast<std::size_t>(count));
    if (count) std::memcpy(out.data(), data_.data() + pos_, count * sizeof(T));
    pos_ += count * sizeof(T);
    return out;
  }

  std::string get_raw(std::size_t n) {
    require(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::string get_string() { return get_raw(get<std::uint32_t>()); }

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(what_ + ": " + msg + " (offset " + std::to_string(pos_) + ")");
  }

 private:
  void require(std::size_t n) const {
    if (n > data_.size() - pos_) fail("unexpected end of data");
  }

  std::span<const std::uint8_t> data_;
  std::string what_;
  std::size_t pos_ = 0;
};

// Artifact envelope: magic, u32 version, body, then a u64 FNV-1a checksum of
// everything before it.
void begin_artifact(Writer& w, std::string_view magic, std::uint32_t version);
Bytes finish_artifact(Writer& w);
// Checks magic, version (VersionError) and checksum; the reader starts at the body.
Reader open_artifact(std::span<const std::uint8_t> bytes, std::string_view magic,
                     std::uint32_t version, const std::string& what);

}  // namespace xgram::io
