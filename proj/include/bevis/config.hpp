#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace bevis {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Plain-text `key = value` settings. '#' starts a comment; a line
/// `include = other.cfg` splices another file (relative to the including
/// file). Later assignments override earlier ones.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text, const std::filesystem::path& base_dir = {});
  static KeyValueConfig load(const std::filesystem::path& path);

  bool contains(const std::string& key) const { return entries_.count(key) > 0; }
  std::optional<std::string> get(const std::string& key) const;
  void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }
  void merge(const KeyValueConfig& other);

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  void parse_into(std::string_view text, const std::filesystem::path& base_dir, int depth);
  std::map<std::string, std::string> entries_;
};

}  // namespace bevis
