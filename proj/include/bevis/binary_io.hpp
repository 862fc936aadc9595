#pragma once

// Little-endian encoding helpers shared by the binary containers.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bevis {

/// Malformed or truncated binary input; `offset` is where decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  template <typename T>
  void scalar(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    buf_.insert(buf_.end(), raw, raw + sizeof(T));
  }
  template <typename T>
  void array(std::span<const T> values) {
    if constexpr (std::endian::native == std::endian::little) {
      const auto* raw = reinterpret_cast<const unsigned char*>(values.data());
      buf_.insert(buf_.end(), raw, raw + values.size_bytes());
    } else {
      for (const T& v : values) scalar(v);
    }
  }
  const std::vector<unsigned char>& buffer() const { return buf_; }
  std::vector<unsigned char> take() { return std::move(buf_); }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> data) : data_(data) {}

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string out(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return out;
  }
  template <typename T>
  T scalar(const char* what) {
    need(sizeof(T), what);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    T v;
    std::memcpy(&v, raw, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  template <typename T>
  std::vector<T> array(std::size_t count, const char* what) {
    if (count > remaining() / sizeof(T)) {
      throw FormatError(std::string("truncated payload reading ") + what, pos_);
    }
    std::vector<T> out(count);
    for (auto& v : out) v = scalar<T>(what);
    return out;
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (n > remaining()) throw FormatError(std::string("truncated payload reading ") + what, pos_);
  }

  std::span<const unsigned char> data_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const unsigned char> bytes);

}  // namespace bevis
