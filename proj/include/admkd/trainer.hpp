#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "admkd/data.hpp"
#include "admkd/losses.hpp"
#include "admkd/nn.hpp"
#include "admkd/optim.hpp"

namespace admkd {

enum class Role { Teacher, Student };

std::string to_string(Role role);
std::optional<Role> parse_role(std::string_view text);

struct ModelEntry {
  std::string name;
  ModelSpec spec;
  Role role = Role::Student;

  bool operator==(const ModelEntry&) const = default;
};

struct OptimConfig {
  Schedule schedule;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  void validate() const;
  bool operator==(const OptimConfig&) const = default;
};

struct RunPlan {
  RunMode mode = RunMode::Online;
  std::vector<ModelEntry> models;
  std::size_t epochs = 1;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  DistillConfig distill;
  OptimConfig optim;
  AugmentPolicy augment{0, 0, 0, 0.0, false};

  /// Throws PlanError for role sets the mode cannot run and ConfigError for
  /// bad scalar fields.
  void validate() const;
  /// Designated (teacher, student) index pairs that carry feature and ADM terms.
  std::vector<std::pair<std::size_t, std::size_t>> pairs() const;
  bool is_frozen(std::size_t model) const;

  bool operator==(const RunPlan&) const = default;
};

/// Adapters (one per stage, student channels → teacher channels) and their
/// optimizer state for one designated pair.
struct PairState {
  std::size_t teacher = 0;
  std::size_t student = 0;
  std::vector<Adapter> adapters;
  OptimState optim;
};

struct RunState {
  RunPlan plan;
  std::vector<Model> models;
  std::vector<OptimState> optims;               // one per model, unused for frozen ones
  std::vector<PairState> pairs;
  std::vector<TeacherPredictionCache> caches;   // one per model, filled for teachers in kd-kd form
  std::size_t next_epoch = 0;

  /// Fresh models, adapters and zeroed velocities, all seeded from the plan.
  /// A model's initial weights depend only on (seed, name).
  static RunState create(RunPlan plan);
};

std::vector<Tensor> adapter_tensors(const PairState& pair);

/// Batch order of one epoch; a pure function of (plan seed, epoch, n).
std::vector<std::vector<std::size_t>> epoch_batches(const RunPlan& plan, std::size_t n, std::size_t epoch);

struct EpochRow {
  std::size_t epoch = 0;
  std::string model;
  double ce = 0, kd = 0, feat = 0, co = 0, di = 0, total = 0;
  double top1_train = 0, top1_test = 0;
  double sim_min = 0, sim_max = 0, sim_var = 0;
  double lr = 0;
};

struct EvalResult {
  double top1 = 0.0;
  double mean_loss = 0.0;
};

/// Argmax accuracy and mean cross-entropy. Throws DataError when empty.
EvalResult evaluate_logits(const Tensor& logits, std::span<const Label> labels);
/// Eval-mode pass over the split in fixed-size chunks; mutates nothing.
EvalResult evaluate(Model& model, const Dataset& data, std::size_t batch_size = 256);

/// One epoch of each mode. Rows carry loss columns, the learning rate and
/// similarity statistics; accuracies are filled by run_epoch.
std::vector<EpochRow> train_epoch_online(RunState& state, const Dataset& train, std::size_t epoch);
std::vector<EpochRow> train_epoch_offline(RunState& state, const Dataset& train, std::size_t epoch);
std::vector<EpochRow> train_epoch_multi(RunState& state, const Dataset& train, std::size_t epoch);
std::vector<EpochRow> train_epoch_independent(RunState& state, const Dataset& train, std::size_t epoch);

/// Trains epoch `state.next_epoch` in the plan's mode, evaluates every model
/// on both splits and advances the epoch counter.
std::vector<EpochRow> run_epoch(RunState& state, const Dataset& train, const Dataset& test);

}  // namespace admkd
