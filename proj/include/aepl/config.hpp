#pragma once

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>

#include "aepl/data.hpp"
#include "aepl/model.hpp"
#include "aepl/trainer.hpp"

namespace aepl {

/// Where training data comes from: a persisted dataset directory, or phantoms
/// generated on the fly.
struct DataConfig {
  int n_cases = 200;
  std::uint64_t seed = 7;
  std::uint64_t split_seed = 11;
  SplitRatio ratio;
  PhantomSpec phantom;
  std::optional<std::string> dataset_dir;
};

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;

  /// Desk-scale defaults.
  static ExperimentConfig desk_scale();
  /// Full recipe: 5 stages from 32 channels, patch (96,160,160), 1000 epochs.
  static ExperimentConfig paper_scale();

  /// Keeps the model and trainer patch sizes consistent and validates both.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const PhantomSpec& c);
void from_json(const nlohmann::json& j, PhantomSpec& c);
void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Missing keys keep their defaults.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
void save_experiment_config(const std::filesystem::path& path, const ExperimentConfig& cfg);

/// Builds (or loads) the dataset described by `cfg`, preprocesses it and
/// assigns the grade-stratified split.
struct PreparedData {
  std::vector<Case> all;
  TrainingData training;
  std::vector<Case> test;
  SplitManifest split;
};
PreparedData prepare_data(const DataConfig& cfg);

}  // namespace aepl
