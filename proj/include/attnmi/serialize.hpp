#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "attnmi/adam.hpp"
#include "attnmi/errors.hpp"
#include "attnmi/tensor.hpp"

namespace attnmi {

inline constexpr int kCheckpointFormatVersion = 1;

inline nlohmann::json params_to_json(const ParamMap& params) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [name, t] : params) {
    out[name] = {{"shape", t->shape}, {"values", t->values}};
  }
  return out;
}

inline ParamMap params_from_json(const nlohmann::json& j) {
  ParamMap out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    Shape shape = it.value().at("shape").get<Shape>();
    std::vector<double> values = it.value().at("values").get<std::vector<double>>();
    auto t = make_tensor(std::move(shape), std::move(values));
    t->requires_grad = true;
    out.emplace(it.key(), std::move(t));
  }
  return out;
}

inline void save_parameters(const std::string& path, const ParamMap& params) {
  nlohmann::json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["params"] = params_to_json(params);
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot open '" + path + "' for writing");
  f << j.dump();
}

inline ParamMap load_parameters(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open '" + path + "'");
  nlohmann::json j;
  f >> j;
  if (!j.contains("format_version") || j["format_version"].get<int>() != kCheckpointFormatVersion)
    throw ConfigError("unsupported checkpoint format in '" + path + "'");
  return params_from_json(j.at("params"));
}

}  // namespace attnmi
