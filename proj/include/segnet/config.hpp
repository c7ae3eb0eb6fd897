#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "segnet/pipeline.hpp"

// JSON form of the run configuration: an object with optional sections
// "model", "aug", "train" and "data". Omitted keys keep their defaults;
// unknown keys and mistyped values are rejected.
namespace segnet::config {

class ConfigError : public ShapeError {
 public:
  using ShapeError::ShapeError;
};

using Json = nlohmann::ordered_json;

Json to_json(const model::ModelConfig& config);
Json to_json(const augment::AugConfig& config);
Json to_json(const pipeline::DataConfig& config);
/// All four sections.
Json to_json(const pipeline::TrainConfig& config);

model::ModelConfig model_from_json(const nlohmann::json& j);
augment::AugConfig aug_from_json(const nlohmann::json& j);
pipeline::DataConfig data_from_json(const nlohmann::json& j);
pipeline::TrainConfig train_config_from_json(const nlohmann::json& j);

/// Parses and validates a config file; every failure is a ConfigError.
pipeline::TrainConfig load_train_config(const std::filesystem::path& path);

/// The defaults, pretty-printed.
std::string default_config_text();

}  // namespace segnet::config
