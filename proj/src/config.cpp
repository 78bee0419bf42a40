#include "maskx/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "maskx/rng.hpp"
#include "maskx/tensor.hpp"

namespace maskx {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KvConfig KvConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

KvConfig KvConfig::from_text(const std::string& text) {
  KvConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    check(eq != std::string::npos, "config: line " + std::to_string(lineno) + " is not key=value");
    cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return cfg;
}

void KvConfig::set(const std::string& key, const std::string& value) {
  check(!key.empty(), "config: empty key");
  kv_[key] = value;
}

void KvConfig::set_pair(const std::string& pair) {
  const size_t eq = pair.find('=');
  check(eq != std::string::npos, "config: --set expects key=value, got '" + pair + "'");
  set(trim(pair.substr(0, eq)), trim(pair.substr(eq + 1)));
}

bool KvConfig::has(const std::string& key) const { return kv_.find(key) != kv_.end(); }

std::string KvConfig::str(const std::string& key, const std::string& fallback) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? fallback : it->second;
}

std::string KvConfig::require(const std::string& key) const {
  auto it = kv_.find(key);
  check(it != kv_.end(), "config: missing required key '" + key + "'");
  return it->second;
}

int64_t KvConfig::integer(const std::string& key, int64_t fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  try {
    size_t used = 0;
    const int64_t v = std::stoll(it->second, &used);
    check(used == it->second.size(), "");
    return v;
  } catch (...) {
    fail("config: key '" + key + "' is not an integer: " + it->second);
  }
}

double KvConfig::real(const std::string& key, double fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  try {
    size_t used = 0;
    const double v = std::stod(it->second, &used);
    check(used == it->second.size(), "");
    return v;
  } catch (...) {
    fail("config: key '" + key + "' is not a number: " + it->second);
  }
}

bool KvConfig::flag(const std::string& key, bool fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  fail("config: key '" + key + "' must be on/off, got: " + v);
}

std::vector<std::string> KvConfig::list(const std::string& key,
                                        const std::vector<std::string>& fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  std::vector<std::string> out;
  std::string cur;
  for (char c : it->second) {
    if (c == ',') {
      const std::string t = trim(cur);
      if (!t.empty()) out.push_back(t);
      cur.clear();
    } else {
      cur += c;
    }
  }
  const std::string t = trim(cur);
  if (!t.empty()) out.push_back(t);
  check(!out.empty(), "config: key '" + key + "' is an empty list");
  return out;
}

std::vector<int> KvConfig::int_list(const std::string& key,
                                    const std::vector<int>& fallback) const {
  if (!has(key)) return fallback;
  std::vector<int> out;
  for (const std::string& s : list(key, {})) {
    try {
      out.push_back(std::stoi(s));
    } catch (...) {
      fail("config: key '" + key + "' has a non-integer entry: " + s);
    }
  }
  return out;
}

void KvConfig::require_known(const std::vector<std::string>& known) const {
  std::string bad;
  for (const auto& [k, v] : kv_) {
    if (std::find(known.begin(), known.end(), k) == known.end()) bad += (bad.empty() ? "" : ", ") + k;
  }
  check(bad.empty(), "config: unknown keys: " + bad);
}

std::string KvConfig::serialize() const {
  std::string out;
  for (const auto& [k, v] : kv_) out += k + " = " + v + "\n";
  return out;
}

uint64_t KvConfig::subset_hash(const std::vector<std::string>& prefixes,
                               const std::vector<std::string>& exclude) const {
  std::string out;
  for (const auto& [k, v] : kv_) {
    bool keep = false;
    for (const std::string& p : prefixes)
      if (k.rfind(p, 0) == 0) keep = true;
    for (const std::string& e : exclude)
      if (k == e) keep = false;
    if (keep) out += k + "=" + v + "\n";
  }
  return fnv1a64(out);
}

}  // namespace maskx
