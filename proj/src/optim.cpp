#include "admkd/optim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "admkd/errors.hpp"

namespace admkd {

void Schedule::validate() const {
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("optim.lr: must be positive");
  if (!(decay > 0.0) || !std::isfinite(decay)) throw ConfigError("optim.decay: must be positive");
  for (std::size_t i = 1; i < milestones.size(); ++i)
    if (milestones[i] <= milestones[i - 1]) throw ConfigError("optim.milestones: must be strictly increasing");
}

double lr_at(const Schedule& schedule, std::size_t epoch) {
  double lr = schedule.base_lr;
  for (auto m : schedule.milestones)
    if (m <= epoch) lr *= schedule.decay;
  return lr;
}

OptimState OptimState::zeros(std::span<const Tensor> params, double lr, double momentum, double weight_decay) {
  OptimState s;
  s.lr = lr;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  for (const auto& p : params) s.velocity.emplace_back(p.numel(), 0.0f);
  return s;
}

void sgd_step(std::span<Tensor> params, std::span<const std::span<const float>> grads, OptimState& state) {
  if (!(state.lr > 0.0)) throw OptimizerError("sgd: lr must be positive");
  if (params.size() != grads.size() || params.size() != state.velocity.size())
    throw OptimizerError("sgd: " + std::to_string(params.size()) + " parameters, " + std::to_string(grads.size()) +
                         " gradients, " + std::to_string(state.velocity.size()) + " velocity buffers");
  const auto lr = static_cast<float>(state.lr), mu = static_cast<float>(state.momentum),
             wd = static_cast<float>(state.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].mutable_values();
    auto& v = state.velocity[i];
    const auto g = grads[i];
    if (theta.size() != v.size() || (!g.empty() && g.size() != theta.size()))
      throw OptimizerError("sgd: shape mismatch at parameter " + std::to_string(i));
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const float gj = (g.empty() ? 0.0f : g[j]) + wd * theta[j];
      v[j] = mu * v[j] + gj;
      theta[j] -= lr * v[j];
    }
  }
}

void sgd_step(std::span<Tensor> params, OptimState& state) {
  std::vector<std::span<const float>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p.has_grad() ? p.grad() : std::span<const float>{});
  sgd_step(params, grads, state);
}

}  // namespace admkd
