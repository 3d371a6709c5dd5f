#pragma once

// Validator for the JSON-Schema subset used by the shipped report schema:
// type (string or array of strings), required, properties,
// additionalProperties (boolean or schema), items, enum, minimum, maximum,
// minItems and local "#/$defs/..." references.

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace biaswap::schema {

using json = nlohmann::json;

namespace detail {

inline bool has_type(const json& v, const std::string& t) {
  if (t == "object") return v.is_object();
  if (t == "array") return v.is_array();
  if (t == "string") return v.is_string();
  if (t == "boolean") return v.is_boolean();
  if (t == "null") return v.is_null();
  if (t == "integer") return v.is_number_integer();
  if (t == "number") return v.is_number();
  return false;
}

inline void walk(const json& v, const json& s, const json& root, const std::string& path, std::vector<std::string>& errors) {
  if (s.contains("$ref")) {
    const std::string ref = s["$ref"].get<std::string>();
    const std::string prefix = "#/$defs/";
    if (ref.rfind(prefix, 0) != 0 || !root.contains("$defs") || !root["$defs"].contains(ref.substr(prefix.size()))) {
      errors.push_back(path + ": unresolvable reference " + ref);
      return;
    }
    walk(v, root["$defs"][ref.substr(prefix.size())], root, path, errors);
    return;
  }
  if (s.contains("type")) {
    bool ok = false;
    if (s["type"].is_array()) {
      for (const auto& t : s["type"]) ok = ok || has_type(v, t.get<std::string>());
    } else {
      ok = has_type(v, s["type"].get<std::string>());
    }
    if (!ok) {
      errors.push_back(path + ": expected type " + s["type"].dump());
      return;
    }
  }
  if (s.contains("enum")) {
    bool found = false;
    for (const auto& e : s["enum"]) found = found || e == v;
    if (!found) errors.push_back(path + ": value " + v.dump() + " not in enum");
  }
  if (v.is_number()) {
    if (s.contains("minimum") && v.get<double>() < s["minimum"].get<double>()) errors.push_back(path + ": below minimum");
    if (s.contains("maximum") && v.get<double>() > s["maximum"].get<double>()) errors.push_back(path + ": above maximum");
  }
  if (v.is_object()) {
    if (s.contains("required"))
      for (const auto& r : s["required"])
        if (!v.contains(r.get<std::string>())) errors.push_back(path + ": missing required property '" + r.get<std::string>() + "'");
    const json props = s.value("properties", json::object());
    for (const auto& [k, child] : v.items()) {
      if (props.contains(k))
        walk(child, props[k], root, path + "." + k, errors);
      else if (s.contains("additionalProperties") && s["additionalProperties"].is_boolean() && !s["additionalProperties"].get<bool>())
        errors.push_back(path + ": unexpected property '" + k + "'");
      else if (s.contains("additionalProperties") && s["additionalProperties"].is_object())
        walk(child, s["additionalProperties"], root, path + "." + k, errors);
    }
  }
  if (v.is_array()) {
    if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>()) errors.push_back(path + ": too few items");
    if (s.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i) walk(v[i], s["items"], root, path + "[" + std::to_string(i) + "]", errors);
  }
}

}  // namespace detail

// Returns a list of human-readable violations; empty means valid.
inline std::vector<std::string> validate(const json& value, const json& schema) {
  std::vector<std::string> errors;
  detail::walk(value, schema, schema, "$", errors);
  return errors;
}

}  // namespace biaswap::schema
