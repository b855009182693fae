#pragma once

// Ordered `key=value` text files: scene manifests, run configs, sidecars.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "corrfield/error.hpp"

namespace corrfield {

class KeyValueFile {
 public:
  using Entry = std::pair<std::string, std::string>;

  // Inserts or overwrites, keeping the position of the first insertion.
  void set(const std::string& key, const std::string& value) {
    for (auto& e : entries_) {
      if (e.first == key) {
        e.second = value;
        return;
      }
    }
    entries_.emplace_back(key, value);
  }

  bool contains(const std::string& key) const { return find(key) != nullptr; }

  std::optional<std::string> get(const std::string& key) const {
    if (const auto* v = find(key)) return *v;
    return std::nullopt;
  }

  const std::string& require(const std::string& key) const {
    if (const auto* v = find(key)) return *v;
    throw DataError("missing key '" + key + "'");
  }

  const std::vector<Entry>& entries() const { return entries_; }

  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
    return out;
  }

  // Blank lines and lines starting with '#' are skipped. Whitespace around
  // keys and values is trimmed. Repeated keys are an error.
  static KeyValueFile parse(const std::string& text) {
    KeyValueFile out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const auto t = trim(line);
      if (t.empty() || t.front() == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw DataError("line " + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
      }
      auto key = trim(t.substr(0, eq));
      if (key.empty()) throw DataError("line " + std::to_string(lineno) + ": empty key");
      if (out.contains(key)) {
        throw DataError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
      }
      out.entries_.emplace_back(std::move(key), trim(t.substr(eq + 1)));
    }
    return out;
  }

  static KeyValueFile load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    try {
      return parse(ss.str());
    } catch (const DataError& e) {
      throw DataError(path + ": " + e.what());
    }
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path);
    f << serialize();
    if (!f) throw DataError("failed writing " + path);
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
  }

 private:
  const std::string* find(const std::string& key) const {
    for (const auto& e : entries_)
      if (e.first == key) return &e.second;
    return nullptr;
  }

  std::vector<Entry> entries_;
};

// Value conversions shared by the config and manifest readers. Failures are
// reported as UsageError naming the key; callers reading files rethrow as
// DataError where appropriate.
namespace kv {

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || v.empty()) {
    throw UsageError("'" + key + "' expects an unsigned integer, got '" + v + "'");
  }
  return out;
}

inline double to_f64(const std::string& key, const std::string& v) {
  double out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || v.empty()) {
    throw UsageError("'" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw UsageError("'" + key + "' expects a boolean, got '" + v + "'");
}

inline std::string from_bool(bool b) { return b ? "true" : "false"; }

// Shortest representation that parses back to the same double.
inline std::string from_f64(double x) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, p);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(KeyValueFile::trim(s.substr(start, pos - start)));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace kv

}  // namespace corrfield
