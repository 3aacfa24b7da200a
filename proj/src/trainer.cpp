#include "admkd/trainer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <set>

#include "admkd/errors.hpp"

namespace admkd {

namespace {

using Scalar = float;

constexpr std::uint64_t kModelStream = 0x6d6f64656cULL;
constexpr std::uint64_t kAdapterStream = 0x6164617074ULL;
constexpr std::uint64_t kBatchStream = 0x6261746368ULL;
constexpr std::uint64_t kAugmentStream = 0x6175676dULL;

std::uint64_t name_key(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

std::vector<Tensor> parameter_tensors(const Model& model) {
  std::vector<Tensor> out;
  for (const auto& p : model.parameters()) out.push_back(p.tensor);
  return out;
}

void check_finite(double value, const std::string& component) {
  if (!std::isfinite(value)) throw NumericError(component, "non-finite loss in " + component);
}

struct Accum {
  double ce = 0, kd = 0, feat = 0, co = 0, di = 0, total = 0;
  double sim_min = std::numeric_limits<double>::infinity();
  double sim_max = -std::numeric_limits<double>::infinity();
  double sim_sum = 0, sim_sq = 0, sim_count = 0;

  void add_weights(const Tensor& w) {
    for (float v : w.values()) {
      sim_min = std::min(sim_min, double(v));
      sim_max = std::max(sim_max, double(v));
      sim_sum += v;
      sim_sq += double(v) * v;
    }
    sim_count += static_cast<double>(w.numel());
  }
};

enum class Flavor { Online, Offline, Multi, Independent };

void require_mode(const RunState& state, RunMode mode, const char* fn) {
  if (state.plan.mode != mode) throw PlanError(std::string(fn) + ": plan mode is " + to_string(state.plan.mode));
}

std::vector<EpochRow> train_epoch_impl(RunState& state, const Dataset& train, std::size_t epoch, Flavor flavor) {
  const RunPlan& plan = state.plan;
  const DistillConfig& dc = plan.distill;
  const std::size_t models = state.models.size();
  if (train.size() == 0) throw DataError("train: empty training split");
  if (train.sample_shape() != plan.models.front().spec.input_shape)
    throw DataError("train: dataset sample shape does not match the model input");

  const double lr = lr_at(plan.optim.schedule, epoch);
  for (auto& o : state.optims) o.lr = lr;
  for (auto& p : state.pairs) p.optim.lr = lr;

  std::vector<std::uint64_t> frozen_sums(models, 0);
  for (std::size_t i = 0; i < models; ++i)
    if (plan.is_frozen(i)) frozen_sums[i] = state.models[i].checksum();

  const bool cache_teachers = dc.adm_form == AdmForm::KdKd && flavor != Flavor::Offline;
  const double delta = delta_at(dc.delta_start, dc.delta_end, epoch, plan.epochs);
  const Scalar gamma = static_cast<Scalar>(dc.gamma), alpha = static_cast<Scalar>(dc.alpha);

  std::vector<Accum> acc(models);
  const auto order = epoch_batches(plan, train.size(), epoch);
  for (const auto& idx : order) {
    const Batch batch = gather(train, idx);
    const Tensor x = plan.augment.enabled
                         ? augment(batch.images, plan.augment, derive_seed(plan.seed, {kAugmentStream, epoch}), idx)
                         : batch.images;
    const double n = static_cast<double>(idx.size());

    std::vector<ForwardResult> out(models);
    for (std::size_t i = 0; i < models; ++i) {
      if (plan.is_frozen(i)) {
        NoGradGuard guard;
        out[i] = state.models[i].forward(x, false);
      } else {
        out[i] = state.models[i].forward(x, true);
      }
    }

    std::optional<Tensor> total;
    auto accumulate = [&](const Tensor& t) { total = total ? add(*total, t) : t; };
    std::vector<double> share(models, 0.0);
    auto name = [&](std::size_t i) { return plan.models[i].name; };

    if (flavor == Flavor::Independent) {
      for (std::size_t i = 0; i < models; ++i) {
        auto c = ce_loss(out[i].logits, batch.labels);
        const double v = c.item();
        check_finite(v, "ce[" + name(i) + "]");
        accumulate(c);
        acc[i].ce += v * n;
        share[i] = v;
      }
    } else if (flavor == Flavor::Offline) {
      const auto [t, s] = plan.pairs().front();
      auto ce = ce_loss(out[s].logits, batch.labels);
      auto kd = kd_loss(out[s].logits, out[t].logits, dc.tau);
      check_finite(ce.item(), "ce[" + name(s) + "]");
      check_finite(kd.item(), "kd[" + name(s) + "]");
      Tensor base = ce;
      if (dc.lambda != 0.0) base = add(base, mul_scalar(kd, static_cast<Scalar>(dc.lambda)));
      accumulate(base);
      acc[s].ce += ce.item() * n;
      acc[s].kd += kd.item() * n;
      share[s] = base.item();
      NoGradGuard guard;
      const double teacher_ce = ce_loss(out[t].logits, batch.labels).item();
      check_finite(teacher_ce, "ce[" + name(t) + "]");
      acc[t].ce += teacher_ce * n;
      share[t] = teacher_ce;
    } else {
      std::vector<Tensor> logits;
      for (const auto& o : out) logits.push_back(o.logits);
      const auto dml = dml_loss<Scalar>(logits, batch.labels, dc.lambda, dc.tau);
      for (std::size_t i = 0; i < models; ++i) {
        check_finite(dml.ce[i].item(), "ce[" + name(i) + "]");
        check_finite(dml.kd[i].item(), "kd[" + name(i) + "]");
        acc[i].ce += dml.ce[i].item() * n;
        acc[i].kd += dml.kd[i].item() * n;
        share[i] = dml.per_model[i].item();
      }
      accumulate(dml.total);
    }

    if (flavor != Flavor::Independent) {
      for (auto& pair : state.pairs) {
        const std::size_t t = pair.teacher, s = pair.student;
        const std::string tag = "[" + name(t) + "->" + name(s) + "]";
        PairOutputs<Scalar> po{out[s].features, out[t].features, out[s].logits, out[t].logits,
                               state.models[s].head(), state.models[t].head()};
        const SoftTargetContext soft{&state.caches[t], idx, delta};
        auto feat = feature_mse_loss<Scalar>(po.student_features, po.teacher_features, pair.adapters, dc.feat_variant);
        auto terms = adm_terms(po, pair.adapters.back(), batch.labels, dc, soft);
        check_finite(feat.item(), "feat" + tag);
        check_finite(terms.co.item(), "co" + tag);
        check_finite(terms.di.item(), "di" + tag);
        if (dc.gamma != 0.0) accumulate(mul_scalar(feat, gamma));
        if (flavor == Flavor::Offline) {
          if (dc.alpha != 0.0) accumulate(mul_scalar(terms.co, alpha));
        } else if (dc.alpha != 0.0 || dc.beta != 0.0) {
          accumulate(adm_loss(terms.co, terms.di, dc.alpha, dc.beta));
        }
        acc[s].feat += feat.item() * n;
        acc[s].co += terms.co.item() * n;
        acc[t].di += terms.di.item() * n;
        share[s] += dc.gamma * feat.item() + dc.alpha * terms.co.item();
        if (flavor != Flavor::Offline) share[t] += dc.beta * terms.di.item();
        acc[s].add_weights(terms.di_weights);
        acc[t].add_weights(terms.di_weights);
      }
    }
    check_finite(total->item(), "total");
    for (std::size_t i = 0; i < models; ++i) acc[i].total += share[i] * n;

    if (cache_teachers) {
      NoGradGuard guard;
      std::set<std::size_t> teachers;
      for (const auto& p : state.pairs) teachers.insert(p.teacher);
      for (auto t : teachers) {
        const auto probs = softmax(out[t].logits.detach(), Scalar(1));
        const auto values = probs.values();
        const std::size_t classes = probs.shape()[1];
        for (std::size_t b = 0; b < idx.size(); ++b)
          state.caches[t].stage(idx[b], values.subspan(b * classes, classes));
      }
    }

    for (std::size_t i = 0; i < models; ++i)
      if (!plan.is_frozen(i)) state.models[i].zero_grad();
    for (auto& pair : state.pairs)
      for (auto& a : pair.adapters) a.weight.zero_grad();
    total->backward();

    for (std::size_t i = 0; i < models; ++i) {
      if (plan.is_frozen(i)) {
        for (const auto& p : state.models[i].parameters())
          if (p.tensor.has_grad() && std::any_of(p.tensor.grad().begin(), p.tensor.grad().end(),
                                                 [](float g) { return g != 0.0f; }))
            throw ContractError("frozen teacher " + name(i) + " received a gradient in " + p.name);
        continue;
      }
      auto params = parameter_tensors(state.models[i]);
      sgd_step(params, state.optims[i]);
    }
    if (flavor != Flavor::Independent)
      for (auto& pair : state.pairs) {
        auto params = adapter_tensors(pair);
        sgd_step(params, pair.optim);
      }
  }

  if (cache_teachers)
    for (auto& c : state.caches) c.commit();
  for (std::size_t i = 0; i < models; ++i)
    if (plan.is_frozen(i) && state.models[i].checksum() != frozen_sums[i])
      throw ContractError("frozen teacher " + plan.models[i].name + " changed during the epoch");

  std::vector<EpochRow> rows;
  const double count = static_cast<double>(train.size());
  for (std::size_t i = 0; i < models; ++i) {
    const auto& a = acc[i];
    EpochRow r;
    r.epoch = epoch;
    r.model = plan.models[i].name;
    r.ce = a.ce / count;
    r.kd = a.kd / count;
    r.feat = a.feat / count;
    r.co = a.co / count;
    r.di = a.di / count;
    r.total = a.total / count;
    r.lr = lr;
    if (a.sim_count > 0) {
      const double mean = a.sim_sum / a.sim_count;
      r.sim_min = a.sim_min;
      r.sim_max = a.sim_max;
      r.sim_var = std::max(0.0, a.sim_sq / a.sim_count - mean * mean);
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace

std::string to_string(Role role) { return role == Role::Teacher ? "teacher" : "student"; }

std::optional<Role> parse_role(std::string_view text) {
  if (text == "teacher") return Role::Teacher;
  if (text == "student") return Role::Student;
  return std::nullopt;
}

void OptimConfig::validate() const {
  schedule.validate();
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optim.momentum: must lie in [0, 1)");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
    throw ConfigError("optim.weight-decay: must be non-negative");
}

void RunPlan::validate() const {
  if (models.empty()) throw PlanError("models: at least one model is required");
  std::set<std::string> names;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const auto& m = models[i];
    if (m.name.empty()) throw PlanError("models[" + std::to_string(i) + "].name: must not be empty");
    if (!std::all_of(m.name.begin(), m.name.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_'; }))
      throw PlanError("models[" + std::to_string(i) + "].name: use letters, digits, '-' or '_'");
    if (!names.insert(m.name).second) throw PlanError("models[" + std::to_string(i) + "].name: duplicate " + m.name);
    m.spec.validate();
    if (m.spec.input_shape != models.front().spec.input_shape || m.spec.num_classes != models.front().spec.num_classes)
      throw PlanError("models[" + std::to_string(i) + "]: input shape and class count must match models[0]");
  }
  if (epochs == 0) throw ConfigError("run.epochs: must be positive");
  if (batch_size == 0) throw ConfigError("run.batch-size: must be positive");
  distill.validate();
  optim.validate();
  if (augment.enabled) augment.validate(models.front().spec.input_shape[1], models.front().spec.input_shape[2]);

  std::size_t teachers = 0;
  for (const auto& m : models) teachers += m.role == Role::Teacher;
  const std::size_t students = models.size() - teachers;
  switch (mode) {
    case RunMode::Online:
    case RunMode::Offline:
      if (models.size() != 2 || teachers != 1)
        throw PlanError(to_string(mode) + " mode needs exactly one teacher and one student (use multi for three)");
      break;
    case RunMode::Multi:
      if (models.size() != 3 || teachers == 0 || students == 0)
        throw PlanError("multi mode needs three models in a 1T2S or 2T1S role assignment");
      break;
    case RunMode::Independent:
      break;
  }
  for (auto [t, s] : pairs()) check_pairable(models[s].spec, models[t].spec);
}

std::vector<std::pair<std::size_t, std::size_t>> RunPlan::pairs() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (mode == RunMode::Independent) return out;
  for (std::size_t t = 0; t < models.size(); ++t)
    if (models[t].role == Role::Teacher)
      for (std::size_t s = 0; s < models.size(); ++s)
        if (models[s].role == Role::Student) out.emplace_back(t, s);
  return out;
}

bool RunPlan::is_frozen(std::size_t model) const {
  return mode == RunMode::Offline && models.at(model).role == Role::Teacher;
}

RunState RunState::create(RunPlan plan) {
  plan.validate();
  RunState state;
  const auto& o = plan.optim;
  for (std::size_t i = 0; i < plan.models.size(); ++i) {
    const auto& m = plan.models[i];
    state.models.emplace_back(m.spec, derive_seed(plan.seed, {kModelStream, name_key(m.name)}));
    if (plan.is_frozen(i)) state.models.back().set_trainable(false);
    const auto params = parameter_tensors(state.models.back());
    state.optims.push_back(OptimState::zeros(params, o.schedule.base_lr, o.momentum, o.weight_decay));
    state.caches.emplace_back(m.spec.num_classes);
  }
  for (auto [t, s] : plan.pairs()) {
    PairState pair;
    pair.teacher = t;
    pair.student = s;
    Rng rng(derive_seed(plan.seed, {kAdapterStream, name_key(plan.models[t].name), name_key(plan.models[s].name)}));
    const auto ts = plan.models[t].spec.tap_shapes(), ss = plan.models[s].spec.tap_shapes();
    for (std::size_t k = 0; k < ts.size(); ++k) pair.adapters.push_back(Adapter::kaiming(ss[k][0], ts[k][0], rng));
    pair.optim = OptimState::zeros(adapter_tensors(pair), o.schedule.base_lr, o.momentum, o.weight_decay);
    state.pairs.push_back(std::move(pair));
  }
  state.plan = std::move(plan);
  return state;
}

std::vector<Tensor> adapter_tensors(const PairState& pair) {
  std::vector<Tensor> out;
  for (const auto& a : pair.adapters) out.push_back(a.weight);
  return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(const RunPlan& plan, std::size_t n, std::size_t epoch) {
  return batches(n, plan.batch_size, derive_seed(plan.seed, {kBatchStream}), epoch);
}

EvalResult evaluate_logits(const Tensor& logits, std::span<const Label> labels) {
  if (labels.empty()) throw DataError("evaluate: empty split");
  if (logits.rank() != 2 || logits.shape()[0] != labels.size())
    throw DimensionError("evaluate: logits must be [N × C] with one label per row");
  const std::size_t classes = logits.shape()[1];
  const auto z = logits.values();
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const auto row = z.subspan(n * classes, classes);
    const auto y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw LabelError("evaluate: label out of range");
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += best == static_cast<std::size_t>(y);
    const double m = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (float v : row) s += std::exp(double(v) - m);
    loss += m + std::log(s) - row[static_cast<std::size_t>(y)];
  }
  const double count = static_cast<double>(labels.size());
  return {static_cast<double>(correct) / count, loss / count};
}

EvalResult evaluate(Model& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw DataError("evaluate: empty split");
  if (batch_size == 0) throw ConfigError("evaluate: batch size must be positive");
  NoGradGuard guard;
  double correct = 0.0, loss = 0.0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const auto batch = gather(data, idx);
    const auto r = evaluate_logits(model.forward(batch.images, false).logits, batch.labels);
    const double n = static_cast<double>(idx.size());
    correct += r.top1 * n;
    loss += r.mean_loss * n;
  }
  const double count = static_cast<double>(data.size());
  return {correct / count, loss / count};
}

std::vector<EpochRow> train_epoch_online(RunState& state, const Dataset& train, std::size_t epoch) {
  require_mode(state, RunMode::Online, "train_epoch_online");
  return train_epoch_impl(state, train, epoch, Flavor::Online);
}

std::vector<EpochRow> train_epoch_offline(RunState& state, const Dataset& train, std::size_t epoch) {
  require_mode(state, RunMode::Offline, "train_epoch_offline");
  return train_epoch_impl(state, train, epoch, Flavor::Offline);
}

std::vector<EpochRow> train_epoch_multi(RunState& state, const Dataset& train, std::size_t epoch) {
  require_mode(state, RunMode::Multi, "train_epoch_multi");
  return train_epoch_impl(state, train, epoch, Flavor::Multi);
}

std::vector<EpochRow> train_epoch_independent(RunState& state, const Dataset& train, std::size_t epoch) {
  require_mode(state, RunMode::Independent, "train_epoch_independent");
  return train_epoch_impl(state, train, epoch, Flavor::Independent);
}

std::vector<EpochRow> run_epoch(RunState& state, const Dataset& train, const Dataset& test) {
  const std::size_t epoch = state.next_epoch;
  std::vector<EpochRow> rows;
  switch (state.plan.mode) {
    case RunMode::Online: rows = train_epoch_online(state, train, epoch); break;
    case RunMode::Offline: rows = train_epoch_offline(state, train, epoch); break;
    case RunMode::Multi: rows = train_epoch_multi(state, train, epoch); break;
    case RunMode::Independent: rows = train_epoch_independent(state, train, epoch); break;
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].top1_train = evaluate(state.models[i], train).top1;
    rows[i].top1_test = evaluate(state.models[i], test).top1;
  }
  ++state.next_epoch;
  return rows;
}

}  // namespace admkd
