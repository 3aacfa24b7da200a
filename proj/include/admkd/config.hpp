#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "admkd/data.hpp"
#include "admkd/trainer.hpp"

namespace admkd {

using Json = nlohmann::ordered_json;

enum class DataSource { Blobs, Idx, Csv };

struct DataConfig {
  DataSource source = DataSource::Blobs;
  // blobs
  std::size_t classes = 4;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 50;
  double noise = 0.1;
  std::uint64_t seed = 1;
  // csv and blobs
  std::array<std::size_t, 3> shape{1, 16, 16};
  // idx and csv, relative to the config file
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  double label_noise = 0.0;
  AugmentPolicy augment{4, 0, 0, 0.5, false};

  bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
  RunPlan plan;
  DataConfig data;
  std::filesystem::path output_dir = "runs/default";
  std::size_t checkpoint_every = 0;
  /// Optional checkpoint manifest per model to start from.
  std::vector<std::filesystem::path> init;

  bool operator==(const RunConfig&) const = default;
};

/// Builds a config from JSON, applying defaults for omitted fields and
/// rejecting unknown keys. Errors are ConfigError messages starting with the
/// offending field path, e.g. "distill.tau: must be positive".
RunConfig parse_config(const Json& doc);
/// Relative data and init paths are resolved against the file's directory.
RunConfig load_config(const std::filesystem::path& path);
Json to_json(const RunConfig& config);

Json to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const Json& doc, const std::string& path);

/// Train and test splits with label noise applied to the training split.
std::pair<Dataset, Dataset> load_datasets(const DataConfig& config);

}  // namespace admkd
