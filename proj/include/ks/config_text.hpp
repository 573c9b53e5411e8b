#pragma once

#include <concepts>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace ks {

/// Ordered `key = value` text, one pair per line; `#` starts a comment.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "<text>");
  static KeyValues read(const std::filesystem::path& path);

  void write(const std::filesystem::path& path) const;
  std::string str() const;

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set(const std::string& key, const char* value) { values_[key] = value; }
  template <std::integral T>
  void set(const std::string& key, T value) {
    values_[key] = std::to_string(value);
  }
  void set(const std::string& key, double value);
  void set(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }

  /// Throw ConfigError when the key is missing or malformed.
  const std::string& get(const std::string& key) const;
  long long get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  std::string get_or(const std::string& key, const std::string& fallback) const;
  long long get_int_or(const std::string& key, long long fallback) const;
  std::uint64_t get_u64_or(const std::string& key, std::uint64_t fallback) const;
  double get_double_or(const std::string& key, double fallback) const;
  bool get_bool_or(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::string origin_;
  std::map<std::string, std::string> values_;
};

/// Shortest round-trippable decimal form of a double.
std::string format_double(double v);

}  // namespace ks
