#pragma once

#include <initializer_list>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "nnm/errors.hpp"

namespace nnm {

// Config objects are strict: a typo must not silently fall back to a default.
inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    if (!known) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

// Reads j[key] into out when present; type errors become ConfigError.
template <typename V>
void read_opt(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  if constexpr (std::is_unsigned_v<V> && !std::is_same_v<V, bool>) {
    if (!j.at(key).is_number_unsigned()) throw ConfigError(where + "." + key + ": expected a non-negative integer");
  }
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace nnm
