#ifndef DOAMO_CONFIG_HPP_
#define DOAMO_CONFIG_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>

namespace doamo {

// Flat "key = value" text. Blank lines and lines starting with '#' are
// skipped; keys are unique.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& source = "<config>");
  static KeyValues load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  // Accepts "inf", "+inf", "-inf".
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;  // true/false/1/0

  // Keys not in `known`; used to reject typos.
  std::set<std::string> unknown_keys(const std::set<std::string>& known) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  std::string source_;
};

}  // namespace doamo

#endif  // DOAMO_CONFIG_HPP_
