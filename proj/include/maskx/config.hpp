#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace maskx {

/// Flat key=value run configuration with section-prefixed keys
/// (gen., split., model., train., eval., ablate., viz.).
class KvConfig {
 public:
  static KvConfig from_file(const std::string& path);
  static KvConfig from_text(const std::string& text);

  void set(const std::string& key, const std::string& value);
  /// "key=value" as passed to --set.
  void set_pair(const std::string& pair);

  bool has(const std::string& key) const;
  std::string str(const std::string& key, const std::string& fallback) const;
  std::string require(const std::string& key) const;
  int64_t integer(const std::string& key, int64_t fallback) const;
  double real(const std::string& key, double fallback) const;
  bool flag(const std::string& key, bool fallback) const;  // on/off/true/false/1/0
  std::vector<std::string> list(const std::string& key,
                                const std::vector<std::string>& fallback) const;
  std::vector<int> int_list(const std::string& key, const std::vector<int>& fallback) const;

  /// Rejects keys outside the known set, naming the offenders.
  void require_known(const std::vector<std::string>& known) const;

  /// Canonical sorted "key = value" lines; what config.resolved contains.
  std::string serialize() const;
  /// Hash over the serialized subset whose keys start with any prefix,
  /// minus explicitly excluded keys.
  uint64_t subset_hash(const std::vector<std::string>& prefixes,
                       const std::vector<std::string>& exclude = {}) const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace maskx
