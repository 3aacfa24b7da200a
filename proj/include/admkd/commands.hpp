#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "admkd/analysis.hpp"
#include "admkd/grad_check.hpp"

namespace admkd {

enum ExitCode : int {
  kExitOk = 0,
  kExitCheckFailure = 1,
  kExitConfig = 2,
  kExitNumeric = 3,
  kExitCheckpoint = 4,
  kExitAnalysis = 5,
};

/// Overrides run.output-dir when set.
inline constexpr const char* kOutputDirEnv = "ADMKD_OUTPUT_DIR";

struct TrainOptions {
  bool resume = false;
};

struct DataOptions {
  std::string split = "test";                       // for config files
  std::optional<std::filesystem::path> labels;      // for IDX image files
};

struct AnalyzeOptions {
  DataOptions data;
  std::optional<std::filesystem::path> reference;  // manifest; defaults to the best teacher
  double cam_threshold = 0.5;
  std::size_t dump_samples = 4;
};

/// Writes metrics.csv, checkpoints/, config.json and summary.json under the
/// output directory, which is locked by a `.lock` file while the run lasts.
int cmd_train(const std::filesystem::path& config, const TrainOptions& options, std::ostream& out, std::ostream& err);

/// Prints {"top1", "mean-ce", ...} as JSON.
int cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data, const DataOptions& options,
             std::ostream& out, std::ostream& err);

/// Writes curves.csv, similarity-stats-<teacher>-<student>.csv, masks/*.pgm
/// and analysis.json to `out_dir`.
int cmd_analyze(const std::filesystem::path& checkpoints, const std::filesystem::path& data,
                const std::filesystem::path& out_dir, const AnalyzeOptions& options, std::ostream& out,
                std::ostream& err);

int cmd_gradcheck(std::ostream& out, std::ostream& err,
                  const std::vector<GradCheckCase>& cases = default_gradcheck_registry());

/// Per-epoch metrics table header shared by cmd_train and its readers.
const std::vector<std::string>& metrics_columns();

}  // namespace admkd
