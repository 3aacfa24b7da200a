#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "admkd/config.hpp"
#include "admkd/trainer.hpp"

namespace admkd {

inline constexpr int kCheckpointVersion = 1;

/// What a manifest says about one saved model.
struct CheckpointInfo {
  std::filesystem::path manifest;
  std::string name;
  Role role = Role::Student;
  ModelSpec spec;
  std::int64_t epoch = 0;  // last completed epoch, −1 before training
  double top1_train = 0.0;
  double top1_test = 0.0;
};

/// Directory holding the checkpoint written after `epoch`.
std::filesystem::path checkpoint_dir(const std::filesystem::path& root, std::size_t epoch);

/// One manifest and blob per model. `rows` supplies the recorded accuracies.
void save_checkpoint(const RunState& state, const std::filesystem::path& dir, const std::vector<EpochRow>& rows);

/// Restores parameters, buffers, velocities, adapters, caches and the epoch
/// counter into a state built from the same plan. Throws CheckpointError.
void load_checkpoint(RunState& state, const std::filesystem::path& dir);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& manifest);

/// Model weights and running statistics from one manifest.
Model load_model(const std::filesystem::path& manifest, CheckpointInfo* info = nullptr);

/// Adapters a student saved for its pairing with `teacher`; empty when none.
std::vector<Adapter> load_adapters(const std::filesystem::path& manifest, const std::string& teacher);

/// Every model manifest below `root` (a run directory or its checkpoints/),
/// ordered by (epoch, name).
std::vector<CheckpointInfo> list_checkpoints(const std::filesystem::path& root);

/// Newest epoch directory below `root`, if any.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& root);

}  // namespace admkd
