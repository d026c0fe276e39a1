#pragma once

// JSON experiment configuration. Documents are layered: defaults (or a
// preset), then the config file, then key=value overrides; the merged document
// is checked for unknown keys and converted. to_json emits every field, so a
// written config reproduces the run.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "fdiv/errors.hpp"
#include "fdiv/harness.hpp"
#include "json.hpp"

namespace fdv {

using Json = nlohmann::json;

inline Json to_json(const EnvConfig& e) {
  return Json{{"kind", to_string(e.kind)},
              {"n_states", e.n_states},
              {"small_reward", e.small_reward},
              {"large_reward", e.large_reward},
              {"success_prob", e.success_prob},
              {"rows", e.rows},
              {"cols", e.cols},
              {"cliff_reward", e.cliff_reward},
              {"goal_reward", e.goal_reward},
              {"step_reward", e.step_reward},
              {"map", e.map},
              {"lake_goal_reward", e.lake_goal_reward}};
}

inline Json to_json(const ExperimentConfig& c) {
  return Json{{"alphas", c.alphas},
              {"schedule", {{"eta0", c.schedule.eta0}, {"decay", c.schedule.decay}}},
              {"runs", c.runs},
              {"horizon", c.horizon},
              {"iterations", c.iterations},
              {"samples_per_update", c.samples_per_update},
              {"warm_start", c.warm_start},
              {"bandit",
               {{"arms", c.bandit.arms},
                {"noise_variance", c.bandit.noise_variance},
                {"include_ucb", c.bandit.include_ucb},
                {"report_horizons", c.bandit.report_horizons}}},
              {"demo", {{"arms", c.demo.arms}, {"eta", c.demo.eta}}},
              {"env", to_json(c.env)},
              {"seed", c.seed},
              {"output_dir", c.output_dir},
              {"workers", c.workers}};
}

namespace detail {

/// Reads doc[key] into out when present, naming the dotted field on mismatch.
template <class T>
void read_field(const Json& doc, const std::string& prefix, const char* key, T& out) {
  const auto it = doc.find(key);
  if (it == doc.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(fmt::format("{}{}: unexpected value {}", prefix, key, it->dump()));
  }
}

/// Rejects keys that `reference` (the fully populated default) does not have.
inline void check_keys(const Json& doc, const Json& reference, const std::string& prefix) {
  if (!doc.is_object()) throw ConfigError(fmt::format("{}: expected an object", prefix.empty() ? "config" : prefix));
  for (const auto& [key, value] : doc.items()) {
    const auto ref = reference.find(key);
    if (ref == reference.end()) throw ConfigError(fmt::format("unknown field '{}{}'", prefix, key));
    if (ref->is_object()) check_keys(value, *ref, prefix + key + ".");
  }
}

inline std::pair<int, int> line_and_column(const std::string& text, std::size_t byte) {
  int line = 1;
  int column = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      column = 1;
    } else {
      ++column;
    }
  }
  return {line, column};
}

}  // namespace detail

inline ExperimentConfig config_from_json(const Json& doc) {
  detail::check_keys(doc, to_json(ExperimentConfig{}), "");
  ExperimentConfig c;
  detail::read_field(doc, "", "alphas", c.alphas);
  if (const auto s = doc.find("schedule"); s != doc.end()) {
    detail::read_field(*s, "schedule.", "eta0", c.schedule.eta0);
    detail::read_field(*s, "schedule.", "decay", c.schedule.decay);
  }
  detail::read_field(doc, "", "runs", c.runs);
  detail::read_field(doc, "", "horizon", c.horizon);
  detail::read_field(doc, "", "iterations", c.iterations);
  detail::read_field(doc, "", "samples_per_update", c.samples_per_update);
  detail::read_field(doc, "", "warm_start", c.warm_start);
  if (const auto b = doc.find("bandit"); b != doc.end()) {
    detail::read_field(*b, "bandit.", "arms", c.bandit.arms);
    detail::read_field(*b, "bandit.", "noise_variance", c.bandit.noise_variance);
    detail::read_field(*b, "bandit.", "include_ucb", c.bandit.include_ucb);
    detail::read_field(*b, "bandit.", "report_horizons", c.bandit.report_horizons);
  }
  if (const auto d = doc.find("demo"); d != doc.end()) {
    detail::read_field(*d, "demo.", "arms", c.demo.arms);
    detail::read_field(*d, "demo.", "eta", c.demo.eta);
  }
  if (const auto e = doc.find("env"); e != doc.end()) {
    std::string kind = to_string(c.env.kind);
    detail::read_field(*e, "env.", "kind", kind);
    c.env = EnvConfig::preset(env_kind_from_string(kind));
    detail::read_field(*e, "env.", "n_states", c.env.n_states);
    detail::read_field(*e, "env.", "small_reward", c.env.small_reward);
    detail::read_field(*e, "env.", "large_reward", c.env.large_reward);
    detail::read_field(*e, "env.", "success_prob", c.env.success_prob);
    detail::read_field(*e, "env.", "rows", c.env.rows);
    detail::read_field(*e, "env.", "cols", c.env.cols);
    detail::read_field(*e, "env.", "cliff_reward", c.env.cliff_reward);
    detail::read_field(*e, "env.", "goal_reward", c.env.goal_reward);
    detail::read_field(*e, "env.", "step_reward", c.env.step_reward);
    detail::read_field(*e, "env.", "map", c.env.map);
    detail::read_field(*e, "env.", "lake_goal_reward", c.env.lake_goal_reward);
  }
  detail::read_field(doc, "", "seed", c.seed);
  detail::read_field(doc, "", "output_dir", c.output_dir);
  detail::read_field(doc, "", "workers", c.workers);
  c.validate();
  return c;
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"chain", "cliffwalking", "frozenlake", "bandit", "policy-demo"};
  return names;
}

/// Published experiment settings.
inline ExperimentConfig preset_config(const std::string& name) {
  ExperimentConfig c;
  if (name == "bandit") {
    c.alphas = {-50.0, -5.0, -1.0, 0.0, 0.5, 1.0, 2.0, 5.0, 50.0};
    c.schedule = {1.0, 0.8};
    c.runs = 400;
    c.horizon = 800;
    c.samples_per_update = 20;
    c.bandit = BanditSettings{};
    c.output_dir = "out/bandit";
    return c;
  }
  if (name == "policy-demo") {
    c.alphas = {-50.0, -1.0, 0.0, 0.5, 1.0, 2.0, 5.0, 50.0};
    c.iterations = 25;
    c.demo = DemoSettings{};
    c.output_dir = "out/policy-demo";
    return c;
  }
  c.alphas = {-3.0, -1.0, 0.0, 0.5, 1.0, 2.0, 10.0};
  c.runs = 10;
  c.warm_start = true;
  if (name == "chain") {
    c.env = EnvConfig::preset(EnvKind::chain);
    c.schedule = {15.0, 0.9};
    c.iterations = 30;
    c.samples_per_update = 800;
  } else if (name == "cliffwalking") {
    c.env = EnvConfig::preset(EnvKind::cliffwalking);
    c.schedule = {50.0, 0.9};
    c.iterations = 40;
    c.samples_per_update = 1500;
  } else if (name == "frozenlake") {
    c.env = EnvConfig::preset(EnvKind::frozenlake);
    c.schedule = {1.0, 0.8};
    c.iterations = 50;
    c.samples_per_update = 2000;
  } else {
    throw ConfigError(fmt::format("unknown preset '{}'", name));
  }
  c.output_dir = "out/" + name;
  return c;
}

/// Parses a JSON value for an override; bare words become strings.
inline Json parse_override_value(const std::string& text) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    return Json(text);
  }
}

inline void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(fmt::format("override '{}' is not of the form key=value", assignment));
  }
  const std::string key = assignment.substr(0, eq);
  std::string pointer;
  std::stringstream parts(key);
  for (std::string part; std::getline(parts, part, '.');) {
    if (part.empty()) throw ConfigError(fmt::format("override key '{}' has an empty component", key));
    pointer += "/" + part;
  }
  doc[Json::json_pointer(pointer)] = parse_override_value(assignment.substr(eq + 1));
}

inline Json read_json_file(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw ConfigError(fmt::format("cannot open config file '{}'", path));
  std::stringstream buffer;
  buffer << file.rdbuf();
  const std::string text = buffer.str();
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const auto [line, column] = detail::line_and_column(text, e.byte);
    throw ConfigError(fmt::format("{}:{}:{}: JSON parse error: {}", path, line, column, e.what()));
  }
}

/// Layers preset (or defaults), file and overrides into a validated config.
inline ExperimentConfig parse_config(const std::string& path, const std::vector<std::string>& overrides,
                                     const std::string& preset = "") {
  Json doc = to_json(preset.empty() ? ExperimentConfig{} : preset_config(preset));
  if (!path.empty()) {
    const Json file = read_json_file(path);
    if (!file.is_object()) throw ConfigError(fmt::format("{}: top level must be an object", path));
    detail::check_keys(file, doc, "");
    doc.merge_patch(file);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

}  // namespace fdv
