#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

namespace emphseg {

/// Flat key=value block. Values are kept as text and parsed on access.
class ConfigSection {
 public:
  explicit ConfigSection(std::string name = {}) : name_(std::move(name)) {}

  const std::string& name() const { return name_; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::string require_string(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_double_list(const std::string& key, std::vector<double> fallback) const;

  /// Throws ConfigError naming the first key not in `known`.
  void reject_unknown(std::initializer_list<const char*> known) const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::string name_;
  std::map<std::string, std::string> values_;
};

/// Plain-text configuration: global key=value lines, then optional `[name]` blocks.
/// Blocks may repeat (one `[scanner]` per scanner profile). '#' starts a comment.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig load(const std::filesystem::path& path);

  const ConfigSection& global() const { return global_; }
  ConfigSection& global() { return global_; }
  std::vector<const ConfigSection*> sections(const std::string& name) const;
  const std::vector<ConfigSection>& all_sections() const { return sections_; }
  void add_section(ConfigSection s) { sections_.push_back(std::move(s)); }

  std::string to_text() const;

 private:
  ConfigSection global_;
  std::vector<ConfigSection> sections_;
};

}  // namespace emphseg
