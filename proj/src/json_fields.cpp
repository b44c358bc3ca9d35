#include "gare/json_fields.hpp"

namespace gare {

namespace {
const nlohmann::json& empty_object() {
  static const nlohmann::json empty = nlohmann::json::object();
  return empty;
}
}  // namespace

StrictObject::StrictObject(const nlohmann::json& obj, std::string path)
    : obj_(obj), path_(std::move(path)) {
  if (!obj_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
}

std::string StrictObject::qualify(std::string_view key) const {
  return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
}

void StrictObject::read_count(std::string_view key, std::size_t& out) {
  const std::string k(key);
  if (!obj_.contains(k)) return;
  used_.insert(k);
  const auto& v = obj_.at(k);
  if (!v.is_number_unsigned()) throw ConfigError(qualify(k), "expected a non-negative integer");
  out = v.get<std::size_t>();
}

void StrictObject::read_u64(std::string_view key, std::uint64_t& out) {
  const std::string k(key);
  if (!obj_.contains(k)) return;
  used_.insert(k);
  const auto& v = obj_.at(k);
  if (!v.is_number_unsigned()) throw ConfigError(qualify(k), "expected a non-negative integer");
  out = v.get<std::uint64_t>();
}

StrictObject StrictObject::child(std::string_view key) {
  const std::string k(key);
  if (!obj_.contains(k)) return StrictObject(empty_object(), qualify(k));
  used_.insert(k);
  return StrictObject(obj_.at(k), qualify(k));
}

void StrictObject::finish() const {
  for (const auto& [k, v] : obj_.items()) {
    if (!used_.contains(k)) throw ConfigError(qualify(k), "unknown key");
  }
}

}  // namespace gare
