#include "vasa/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "vasa/tensor.hpp"

namespace vasa {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KvConfig KvConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "cannot open config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_string(ss.str());
}

KvConfig KvConfig::from_string(const std::string& text) {
  KvConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    require(eq != std::string::npos, "config line " + std::to_string(lineno) + " has no '='");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    require(!key.empty(), "config line " + std::to_string(lineno) + " has empty key");
    c.kv_[key] = val;
  }
  return c;
}

void KvConfig::set_double(const std::string& key, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  kv_[key] = buf;
}

std::string KvConfig::get_str(const std::string& key) const {
  auto it = kv_.find(key);
  require(it != kv_.end(), "missing config key: " + key);
  return it->second;
}

std::string KvConfig::get_str(const std::string& key, const std::string& fallback) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? fallback : it->second;
}

int64_t KvConfig::get_int(const std::string& key) const {
  const std::string v = get_str(key);
  size_t pos = 0;
  int64_t r = 0;
  try {
    r = std::stoll(v, &pos);
  } catch (...) {
    fail("config key " + key + " is not an integer: " + v);
  }
  require(pos == v.size(), "config key " + key + " is not an integer: " + v);
  return r;
}

int64_t KvConfig::get_int(const std::string& key, int64_t fallback) const {
  return has(key) ? get_int(key) : fallback;
}

double KvConfig::get_double(const std::string& key) const {
  const std::string v = get_str(key);
  size_t pos = 0;
  double r = 0;
  try {
    r = std::stod(v, &pos);
  } catch (...) {
    fail("config key " + key + " is not a number: " + v);
  }
  require(pos == v.size(), "config key " + key + " is not a number: " + v);
  return r;
}

double KvConfig::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

bool KvConfig::get_bool(const std::string& key) const {
  std::string v = get_str(key);
  std::transform(v.begin(), v.end(), v.begin(), ::tolower);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  fail("config key " + key + " is not a boolean: " + v);
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
  return has(key) ? get_bool(key) : fallback;
}

std::vector<std::string> KvConfig::keys() const {
  std::vector<std::string> r;
  r.reserve(kv_.size());
  for (const auto& [k, v] : kv_) r.push_back(k);
  return r;
}

void KvConfig::check_known_keys(const std::vector<std::string>& allowed) const {
  std::string bad;
  for (const auto& [k, v] : kv_) {
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
      bad += bad.empty() ? k : ", " + k;
    }
  }
  require(bad.empty(), "unknown config keys: " + bad);
}

std::string KvConfig::to_string() const {
  std::string out;
  for (const auto& [k, v] : kv_) out += k + " = " + v + "\n";
  return out;
}

void KvConfig::save(const std::string& path) const {
  std::ofstream f(path);
  require(f.good(), "cannot write config file: " + path);
  f << to_string();
}

}  // namespace vasa
