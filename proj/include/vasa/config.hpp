#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace vasa {

// Flat key=value configuration. Lines are `key = value`, `#` starts a
// comment, blank lines are ignored. Keys are kept sorted on output.
class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig from_file(const std::string& path);
  static KvConfig from_string(const std::string& text);

  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  void set_int(const std::string& key, int64_t v) { kv_[key] = std::to_string(v); }
  void set_double(const std::string& key, double v);
  void set_bool(const std::string& key, bool v) { kv_[key] = v ? "true" : "false"; }

  std::string get_str(const std::string& key) const;
  std::string get_str(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key) const;
  bool get_bool(const std::string& key, bool fallback) const;

  std::vector<std::string> keys() const;

  // Overlay: values from `other` win.
  void merge(const KvConfig& other) {
    for (const auto& [k, v] : other.kv_) kv_[k] = v;
  }

  // Throws listing any key not in `allowed`.
  void check_known_keys(const std::vector<std::string>& allowed) const;

  std::string to_string() const;
  void save(const std::string& path) const;

  bool operator==(const KvConfig& o) const { return kv_ == o.kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace vasa
