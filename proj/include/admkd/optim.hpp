#pragma once

#include <span>
#include <vector>

#include "admkd/nn.hpp"

namespace admkd {

struct Schedule {
  double base_lr = 0.1;
  std::vector<std::size_t> milestones;
  double decay = 0.1;

  /// Throws ConfigError for a non-positive rate or unsorted milestones.
  void validate() const;
  bool operator==(const Schedule&) const = default;
};

/// base_lr · decay^(milestones ≤ epoch); a milestone takes effect at its own epoch.
double lr_at(const Schedule& schedule, std::size_t epoch);

struct OptimState {
  std::vector<std::vector<float>> velocity;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;

  /// Zero velocities mirroring `params`.
  static OptimState zeros(std::span<const Tensor> params, double lr, double momentum, double weight_decay);
};

/// g' = g + wd·θ; v ← μ·v + g'; θ ← θ − lr·v. Throws OptimizerError when
/// sizes disagree or lr ≤ 0.
void sgd_step(std::span<Tensor> params, std::span<const std::span<const float>> grads, OptimState& state);

/// Uses each tensor's accumulated gradient; a tensor without one is treated
/// as having a zero gradient.
void sgd_step(std::span<Tensor> params, OptimState& state);

}  // namespace admkd
