#include "bevis/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace bevis {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

constexpr int kMaxIncludeDepth = 16;

}  // namespace

KeyValueConfig KeyValueConfig::parse(std::string_view text, const std::filesystem::path& base_dir) {
  KeyValueConfig cfg;
  cfg.parse_into(text, base_dir, 0);
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  KeyValueConfig cfg;
  cfg.parse_into(ss.str(), path.parent_path(), 0);
  return cfg;
}

void KeyValueConfig::parse_into(std::string_view text, const std::filesystem::path& base_dir,
                                int depth) {
  if (depth > kMaxIncludeDepth) throw ConfigError("config include depth exceeds limit");
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    if (key == "include") {
      const std::filesystem::path inc = base_dir / value;
      std::ifstream in(inc);
      if (!in) throw ConfigError("cannot open included config '" + inc.string() + "'");
      std::stringstream ss;
      ss << in.rdbuf();
      parse_into(ss.str(), inc.parent_path(), depth + 1);
    } else {
      entries_[key] = value;
    }
  }
}

void KeyValueConfig::merge(const KeyValueConfig& other) {
  for (const auto& [k, v] : other.entries_) entries_[k] = v;
}

std::optional<std::string> KeyValueConfig::get(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  return get(key).value_or(fallback);
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    const double d = std::stod(*v, &used);
    if (used != v->size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + *v + "' is not a number");
  }
}

std::int64_t KeyValueConfig::get_int(const std::string& key, std::int64_t fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc() || ptr != v->data() + v->size()) {
    throw ConfigError("config key '" + key + "': '" + *v + "' is not an integer");
  }
  return out;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  if (*v == "1" || *v == "true" || *v == "yes" || *v == "on") return true;
  if (*v == "0" || *v == "false" || *v == "no" || *v == "off") return false;
  throw ConfigError("config key '" + key + "': '" + *v + "' is not a boolean");
}

}  // namespace bevis
