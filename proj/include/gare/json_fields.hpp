// Strict JSON object reading: every key must be consumed, types must match,
// and errors name the full key path (e.g. "data.gap_offset").

#ifndef GARE_JSON_FIELDS_HPP
#define GARE_JSON_FIELDS_HPP

#include <cstddef>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace gare {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::invalid_argument(key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class StrictObject {
 public:
  StrictObject(const nlohmann::json& obj, std::string path);

  bool has(std::string_view key) const { return obj_.contains(std::string(key)); }

  /// Reads `key` into `out` when present; leaves `out` untouched otherwise.
  template <typename T>
  void read(std::string_view key, T& out) {
    const std::string k(key);
    if (!obj_.contains(k)) return;
    used_.insert(k);
    try {
      out = obj_.at(k).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(qualify(k), "wrong type");
    }
  }

  /// Non-negative integer field; rejects negatives and fractions.
  void read_count(std::string_view key, std::size_t& out);
  void read_u64(std::string_view key, std::uint64_t& out);

  /// Nested object (an empty one when the key is absent).
  StrictObject child(std::string_view key);
  std::string qualify(std::string_view key) const;
  /// Throws ConfigError on the first key never read.
  void finish() const;

 private:
  const nlohmann::json& obj_;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace gare

#endif  // GARE_JSON_FIELDS_HPP
