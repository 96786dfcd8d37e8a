#pragma once

#include "dos/probe.hpp"
#include "dos/scenegen.hpp"
#include "dos/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace dos {

using json = nlohmann::json;

/// Full pipeline configuration: sections scene, views, mask, encoder,
/// objective, transport, train, probe. Every field has a default.
struct RunConfig {
  SceneConfig scene;
  int num_scenes = 60;
  TrainConfig train;
  ProbeConfig probe;

  void validate() const;
};

/// Strict parse: unknown keys and wrong types are rejected. All problems are
/// collected and raised together as one ConfigError whose path is the first
/// offending JSON pointer.
RunConfig run_config_from_json(const json& j);
json run_config_to_json(const RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

json scene_config_to_json(const SceneConfig& c);
SceneConfig scene_config_from_json(const json& j, const std::string& path);

/// Train config in the same sectioned layout (views, mask, encoder, objective,
/// transport, train); used by checkpoints.
json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const json& j);

/// Stable hex digest of a JSON document (FNV-1a over its canonical dump).
std::string config_hash(const json& j);

}  // namespace dos
