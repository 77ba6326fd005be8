#pragma once

#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "beamllm/error.hpp"

namespace beamllm {

/// Reads optional fields from a JSON object and rejects keys nobody asked for.
/// Call finish() after the last read.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& object, std::string where) : object_(object), where_(std::move(where)) {
    if (!object_.is_object()) throw Error(ErrorKind::config, where_ + ": expected a JSON object");
  }

  template <class T>
  bool read(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = object_.find(key);
    if (it == object_.end()) return false;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorKind::config, where_ + "." + key + ": wrong type (" + std::string(it->type_name()) + ")");
    }
    return true;
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    const auto it = object_.find(key);
    return it == object_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& item : object_.items()) {
      if (!seen_.contains(item.key())) throw Error(ErrorKind::config, where_ + ": unknown key \"" + item.key() + "\"");
    }
  }

 private:
  const nlohmann::json& object_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace beamllm
