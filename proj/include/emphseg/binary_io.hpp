#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "emphseg/errors.hpp"

namespace emphseg::io {

/// Appends little-endian encoded values to a byte buffer.
class ByteWriter {
 public:
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void text(std::string_view s) {
    buf_.insert(buf_.end(), s.begin(), s.end());
  }

  template <class T>
  void le(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(raw, raw + sizeof(T));
    }
    buf_.insert(buf_.end(), raw, raw + sizeof(T));
  }

  /// u32 length prefix followed by the raw bytes.
  void string(std::string_view s) {
    le(static_cast<std::uint32_t>(s.size()));
    text(s);
  }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Cursor over a byte buffer; every read is bounds-checked.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  template <class T>
  T le() {
    static_assert(std::is_trivially_copyable_v<T>);
    auto raw = bytes(sizeof(T));
    std::uint8_t tmp[sizeof(T)];
    std::memcpy(tmp, raw.data(), sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(tmp, tmp + sizeof(T));
    }
    T value;
    std::memcpy(&value, tmp, sizeof(T));
    return value;
  }

  std::string string() {
    auto n = le<std::uint32_t>();
    auto raw = bytes(n);
    return std::string(raw.begin(), raw.end());
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw TruncatedError("unexpected end of data at offset " + std::to_string(pos_) +
                           " (need " + std::to_string(n) + " bytes, have " +
                           std::to_string(data_.size() - pos_) + ")");
    }
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data);
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

/// Round-trippable decimal for a double (17 significant digits).
std::string format_double(double value);
double parse_double(std::string_view text);

}  // namespace emphseg::io
