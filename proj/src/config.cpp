#include "emphseg/config.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include "emphseg/binary_io.hpp"
#include "emphseg/errors.hpp"

namespace emphseg {

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string ConfigSection::get_string(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::string ConfigSection::require_string(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) {
    throw ConfigError("missing required key '" + key + "'" +
                      (name_.empty() ? std::string() : " in [" + name_ + "]"));
  }
  return it->second;
}

double ConfigSection::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    return io::parse_double(it->second);
  } catch (const FormatError&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + it->second + "'");
  }
}

long long ConfigSection::get_int(const std::string& key, long long fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  long long out = 0;
  const auto& s = it->second;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("key '" + key + "': expected an integer, got '" + s + "'");
  }
  return out;
}

std::uint64_t ConfigSection::get_u64(const std::string& key, std::uint64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::uint64_t out = 0;
  const auto& s = it->second;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("key '" + key + "': expected an unsigned integer, got '" + s + "'");
  }
  return out;
}

bool ConfigSection::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const auto& s = it->second;
  if (s == "1" || s == "true" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "no") return false;
  throw ConfigError("key '" + key + "': expected a boolean, got '" + s + "'");
}

std::vector<double> ConfigSection::get_double_list(const std::string& key,
                                                   std::vector<double> fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<double> out;
  std::string item;
  std::istringstream is(it->second);
  while (std::getline(is, item, ',')) {
    try {
      out.push_back(io::parse_double(trim(item)));
    } catch (const FormatError&) {
      throw ConfigError("key '" + key + "': bad list element '" + item + "'");
    }
  }
  return out;
}

void ConfigSection::reject_unknown(std::initializer_list<const char*> known) const {
  for (const auto& [k, v] : values_) {
    bool ok = std::any_of(known.begin(), known.end(), [&](const char* n) { return k == n; });
    if (!ok) {
      throw ConfigError("unknown key '" + k + "'" +
                        (name_.empty() ? std::string() : " in [" + name_ + "]"));
    }
  }
}

KeyValueConfig KeyValueConfig::parse(const std::string& text) {
  KeyValueConfig cfg;
  ConfigSection* current = &cfg.global_;
  std::istringstream is(text);
  std::string raw;
  std::size_t lineno = 0;
  // sections_ may reallocate; track the active block by index
  std::ptrdiff_t active = -1;
  while (std::getline(is, raw)) {
    ++lineno;
    auto hash = raw.find('#');
    auto line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError("config line " + std::to_string(lineno) + ": malformed section header");
      }
      cfg.sections_.emplace_back(trim(line.substr(1, line.size() - 2)));
      active = static_cast<std::ptrdiff_t>(cfg.sections_.size()) - 1;
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    current = active < 0 ? &cfg.global_ : &cfg.sections_[static_cast<std::size_t>(active)];
    if (current->has(key)) {
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    current->set(key, value);
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  try {
    return parse(io::read_text_file(path));
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
}

std::vector<const ConfigSection*> KeyValueConfig::sections(const std::string& name) const {
  std::vector<const ConfigSection*> out;
  for (const auto& s : sections_) {
    if (s.name() == name) out.push_back(&s);
  }
  return out;
}

std::string KeyValueConfig::to_text() const {
  std::ostringstream os;
  for (const auto& [k, v] : global_.values()) os << k << " = " << v << '\n';
  for (const auto& s : sections_) {
    os << "\n[" << s.name() << "]\n";
    for (const auto& [k, v] : s.values()) os << k << " = " << v << '\n';
  }
  return os.str();
}

}  // namespace emphseg
