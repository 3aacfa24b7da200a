#include "admkd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace admkd {

namespace {

constexpr double kProbFloor = 1e-12;
constexpr double kCosineFloor = 1e-8;
constexpr double kNormFloor = 1e-8;

template <typename T>
std::string num(T v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

void check_tau(double tau) {
  if (!(tau > 0.0)) throw ParameterError("temperature must be > 0, got " + num(tau));
}

template <typename S>
void check_logits(const TensorT<S>& z, const char* what) {
  if (z.rank() != 2) throw DimensionError(std::string(what) + ": logits must be B×C, got " + to_string(z.shape()));
}

template <typename S>
void check_labels(const TensorT<S>& logits, std::span<const Label> labels) {
  check_logits(logits, "ce_loss");
  const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
  if (labels.size() != batch) {
    throw DimensionError("labels: expected " + std::to_string(batch) + " entries, got " +
                         std::to_string(labels.size()));
  }
  for (auto y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw LabelError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

template <typename S>
TensorT<S> one_hot(std::span<const Label> labels, std::size_t classes) {
  auto t = TensorT<S>::zeros({labels.size(), classes});
  auto v = t.mutable_values();
  for (std::size_t b = 0; b < labels.size(); ++b) v[b * classes + static_cast<std::size_t>(labels[b])] = S(1);
  return t;
}

// τ²/B · Σ q·(log q − log p), with q and log q constant.
template <typename S>
TensorT<S> kl_rows(const TensorT<S>& log_p, const TensorT<S>& q, const TensorT<S>& log_q, double tau) {
  const double scale = tau * tau / static_cast<double>(log_p.shape()[0]);
  return mul_scalar(sum(mul(q, sub(log_q, log_p))), static_cast<S>(scale));
}

template <typename S>
TensorT<S> floored_log(const TensorT<S>& q) {
  TensorT<S> out(q.shape(), std::vector<S>(q.values().begin(), q.values().end()));
  for (auto& v : out.mutable_values()) v = static_cast<S>(std::log(std::max(static_cast<double>(v), kProbFloor)));
  return out;
}

template <typename S>
void check_weights(const TensorT<S>& features, const TensorT<S>& weights, const char* what) {
  const auto& f = features.shape();
  const auto& w = weights.shape();
  if (f.size() != 4 || w.size() != 4 || w[0] != f[0] || w[1] != 1 || w[2] != f[2] || w[3] != f[3]) {
    throw PairingError(std::string(what) + ": weights " + to_string(w) + " do not pair with features " +
                       to_string(f));
  }
}

template <typename S>
TensorT<S> channel_normalize(const TensorT<S>& x) {
  const auto norm = sqrt(add_scalar(sum(square(x), {2, 3}, true), static_cast<S>(kNormFloor)));
  return div(x, norm);
}

// Mean of the squared errors that survive dropping the largest ⌈n/3⌉.
template <typename S>
TensorT<S> drop_third_mse(const TensorT<S>& a, const TensorT<S>& b) {
  const auto err = square(sub(a, b));
  const auto values = err.values();
  const std::size_t n = values.size();
  const std::size_t dropped = (n + 2) / 3;
  const std::size_t kept = n - dropped;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return values[i] > values[j]; });
  auto mask = TensorT<S>::ones(err.shape());
  auto m = mask.mutable_values();
  for (std::size_t i = 0; i < dropped; ++i) m[order[i]] = S(0);
  const double denom = kept == 0 ? 1.0 : static_cast<double>(kept);
  return mul_scalar(sum(mul(err, mask)), static_cast<S>(1.0 / denom));
}

}  // namespace

std::string to_string(AdmForm form) {
  switch (form) {
    case AdmForm::CeCe: return "ce-ce";
    case AdmForm::KdCe: return "kd-ce";
    case AdmForm::KdKd: return "kd-kd";
  }
  return "?";
}

std::string to_string(FeatVariant variant) {
  switch (variant) {
    case FeatVariant::Plain: return "plain";
    case FeatVariant::Norm: return "norm";
    case FeatVariant::Relu: return "relu";
    case FeatVariant::DropThird: return "drop-third";
  }
  return "?";
}

std::string to_string(RunMode mode) {
  switch (mode) {
    case RunMode::Online: return "online";
    case RunMode::Offline: return "offline";
    case RunMode::Multi: return "multi";
    case RunMode::Independent: return "independent";
  }
  return "?";
}

std::optional<AdmForm> parse_adm_form(const std::string& text) {
  for (auto f : {AdmForm::CeCe, AdmForm::KdCe, AdmForm::KdKd})
    if (to_string(f) == text) return f;
  return std::nullopt;
}

std::optional<FeatVariant> parse_feat_variant(const std::string& text) {
  for (auto v : {FeatVariant::Plain, FeatVariant::Norm, FeatVariant::Relu, FeatVariant::DropThird})
    if (to_string(v) == text) return v;
  return std::nullopt;
}

std::optional<RunMode> parse_run_mode(const std::string& text) {
  for (auto m : {RunMode::Online, RunMode::Offline, RunMode::Multi, RunMode::Independent})
    if (to_string(m) == text) return m;
  return std::nullopt;
}

void DistillConfig::validate() const {
  auto finite = [](const char* field, double v) {
    if (!std::isfinite(v)) throw ConfigError(std::string("distill.") + field + ": must be finite");
  };
  auto positive = [&](const char* field, double v) {
    finite(field, v);
    if (!(v > 0.0)) throw ConfigError(std::string("distill.") + field + ": must be > 0, got " + num(v));
  };
  auto non_negative = [&](const char* field, double v) {
    finite(field, v);
    if (v < 0.0) throw ConfigError(std::string("distill.") + field + ": must be >= 0, got " + num(v));
  };
  auto unit = [&](const char* field, double v) {
    finite(field, v);
    if (v < 0.0 || v > 1.0) throw ConfigError(std::string("distill.") + field + ": must lie in [0, 1], got " + num(v));
  };
  positive("tau", tau);
  positive("eps", eps);
  non_negative("lambda", lambda);
  non_negative("alpha", alpha);
  non_negative("beta", beta);
  non_negative("gamma", gamma);
  unit("delta_start", delta_start);
  unit("delta_end", delta_end);
}

DistillConfig DistillConfig::imagenet_like() {
  DistillConfig c;
  c.alpha = 0.2;
  c.beta = 0.6;
  c.gamma = 0.01;
  return c;
}

DistillConfig DistillConfig::cifar_like() {
  DistillConfig c;
  c.alpha = 0.01;
  c.beta = 0.01;
  c.gamma = 1.0;
  return c;
}

double delta_at(double start, double end, std::size_t epoch, std::size_t epochs) {
  if (epochs <= 1 || epoch == 0) return start;
  const std::size_t last = epochs - 1;
  if (epoch >= last) return end;
  // Two segments meeting at epochs/2; a single line when epochs is odd.
  const std::size_t mid = epochs / 2;
  const double middle = (start + end) / 2.0;
  if (epoch == mid) return middle;
  const double k = static_cast<double>(epoch);
  if (epoch < mid) return (static_cast<double>(mid - epoch) * start + k * middle) / static_cast<double>(mid);
  return (static_cast<double>(last - epoch) * middle + static_cast<double>(epoch - mid) * end) /
         static_cast<double>(last - mid);
}

void TeacherPredictionCache::stage(std::size_t index, std::span<const float> probabilities) {
  if (num_classes_ == 0) num_classes_ = probabilities.size();
  if (probabilities.size() != num_classes_) {
    throw CacheError("teacher cache: row for sample " + std::to_string(index) + " has " +
                     std::to_string(probabilities.size()) + " classes, expected " + std::to_string(num_classes_));
  }
  double total = 0.0;
  for (float p : probabilities) {
    if (!(p >= 0.0f) || !std::isfinite(p)) {
      throw CacheError("teacher cache: row for sample " + std::to_string(index) + " is not a distribution");
    }
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-4) {
    throw CacheError("teacher cache: row for sample " + std::to_string(index) + " sums to " + num(total));
  }
  std::vector<float> row(probabilities.size());
  for (std::size_t c = 0; c < row.size(); ++c) row[c] = static_cast<float>(probabilities[c] / total);
  pending_[index] = std::move(row);
}

void TeacherPredictionCache::commit() {
  for (auto& [index, row] : pending_) current_[index] = std::move(row);
  pending_.clear();
}

std::span<const float> TeacherPredictionCache::at(std::size_t index) const {
  const auto it = current_.find(index);
  if (it == current_.end()) {
    throw CacheError("teacher cache: no previous-epoch prediction for sample " + std::to_string(index));
  }
  return it->second;
}

void TeacherPredictionCache::restore(std::map<std::size_t, std::vector<float>> entries) {
  for (const auto& [index, row] : entries) {
    if (num_classes_ == 0) num_classes_ = row.size();
    if (row.size() != num_classes_) {
      throw CacheError("teacher cache: restored row for sample " + std::to_string(index) + " has wrong width");
    }
  }
  current_ = std::move(entries);
  pending_.clear();
}

template <typename S>
TensorT<S> ce_loss(const TensorT<S>& logits, std::span<const Label> labels) {
  check_labels(logits, labels);
  const auto target = one_hot<S>(labels, logits.shape()[1]);
  const auto picked = sum(mul(target, log_softmax(logits, S(1))));
  return mul_scalar(picked, static_cast<S>(-1.0 / static_cast<double>(labels.size())));
}

template <typename S>
TensorT<S> kd_loss(const TensorT<S>& student, const TensorT<S>& teacher, double tau) {
  check_tau(tau);
  check_logits(student, "kd_loss");
  if (student.shape() != teacher.shape()) {
    throw DimensionError("kd_loss: student " + to_string(student.shape()) + " vs teacher " +
                         to_string(teacher.shape()));
  }
  const auto reference = detach(teacher);
  auto log_q = detach(log_softmax(reference, static_cast<S>(tau)));
  const auto q = detach(softmax(reference, static_cast<S>(tau)));
  const S floor = static_cast<S>(std::log(kProbFloor));
  for (auto& v : log_q.mutable_values()) v = std::max(v, floor);
  return kl_rows(log_softmax(student, static_cast<S>(tau)), q, log_q, tau);
}

template <typename S>
TensorT<S> kd_to_target(const TensorT<S>& logits, const TensorT<S>& target, double tau) {
  check_tau(tau);
  check_logits(logits, "kd_to_target");
  if (logits.shape() != target.shape()) {
    throw DimensionError("kd_to_target: logits " + to_string(logits.shape()) + " vs target " +
                         to_string(target.shape()));
  }
  const auto q = detach(target);
  return kl_rows(log_softmax(logits, static_cast<S>(tau)), q, floored_log(q), tau);
}

template <typename S>
DmlResult<S> dml_loss(std::span<const TensorT<S>> logits, std::span<const Label> labels, double lambda, double tau) {
  if (logits.size() < 2) {
    throw ConfigError("mutual learning needs at least 2 models, got " + std::to_string(logits.size()));
  }
  check_tau(tau);
  DmlResult<S> out;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.ce.push_back(ce_loss(logits[i], labels));
    TensorT<S> kd;
    for (std::size_t n = 0; n < logits.size(); ++n) {
      if (n == i) continue;
      const auto term = kd_loss(logits[i], logits[n], tau);
      kd = kd.node() ? add(kd, term) : term;
    }
    if (logits.size() > 2) kd = mul_scalar(kd, static_cast<S>(1.0 / static_cast<double>(logits.size() - 1)));
    out.kd.push_back(kd);
    out.per_model.push_back(lambda == 0.0 ? out.ce.back() : add(out.ce.back(), mul_scalar(kd, static_cast<S>(lambda))));
    out.total = i == 0 ? out.per_model.back() : add(out.total, out.per_model.back());
  }
  return out;
}

template <typename S>
SimilarityMapT<S> similarity_map(const TensorT<S>& fs, const TensorT<S>& ft) {
  if (fs.rank() != 4 || fs.shape() != ft.shape()) {
    throw PairingError("similarity_map: feature shapes " + to_string(fs.shape()) + " and " + to_string(ft.shape()) +
                       " do not pair");
  }
  const std::size_t batch = fs.shape()[0], channels = fs.shape()[1];
  const std::size_t plane = fs.shape()[2] * fs.shape()[3];
  std::vector<S> values(batch * plane), means(batch);
  const auto a = fs.values(), b = ft.values();
  for (std::size_t n = 0; n < batch; ++n) {
    double total = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t c = 0; c < channels; ++c) {
        const double x = a[(n * channels + c) * plane + p], y = b[(n * channels + c) * plane + p];
        dot += x * y;
        na += x * x;
        nb += y * y;
      }
      const double cosine = std::clamp(dot / std::max(std::sqrt(na) * std::sqrt(nb), kCosineFloor), -1.0, 1.0);
      values[n * plane + p] = static_cast<S>(cosine);
      total += static_cast<double>(values[n * plane + p]);
    }
    means[n] = static_cast<S>(total / static_cast<double>(plane));
  }
  return {TensorT<S>({batch, fs.shape()[2], fs.shape()[3]}, std::move(values)), TensorT<S>({batch}, std::move(means))};
}

template <typename S>
TensorT<S> consensus_weights(const SimilarityMapT<S>& s, double eps) {
  const auto& shape = s.values.shape();
  const std::size_t batch = shape[0], plane = shape[1] * shape[2];
  std::vector<S> w(batch * plane);
  for (std::size_t n = 0; n < batch; ++n) {
    const double denom = 1.0 + static_cast<double>(s.mean.values()[n]) + eps;
    for (std::size_t p = 0; p < plane; ++p)
      w[n * plane + p] = static_cast<S>((1.0 + static_cast<double>(s.values.values()[n * plane + p])) / denom);
  }
  return TensorT<S>({batch, 1, shape[1], shape[2]}, std::move(w));
}

template <typename S>
TensorT<S> divergence_weights(const SimilarityMapT<S>& s, double eps) {
  const auto& shape = s.values.shape();
  const std::size_t batch = shape[0], plane = shape[1] * shape[2];
  std::vector<S> w(batch * plane);
  for (std::size_t n = 0; n < batch; ++n) {
    double total = 0.0;
    for (std::size_t p = 0; p < plane; ++p) total += 1.0 - static_cast<double>(s.values.values()[n * plane + p]);
    const double denom = total / static_cast<double>(plane) + eps;
    for (std::size_t p = 0; p < plane; ++p)
      w[n * plane + p] = static_cast<S>((1.0 - static_cast<double>(s.values.values()[n * plane + p])) / denom);
  }
  return TensorT<S>({batch, 1, shape[1], shape[2]}, std::move(w));
}

template <typename S>
TensorT<S> weighted_head_logits(const LinearHeadT<S>& head, const TensorT<S>& features, const TensorT<S>& weights) {
  check_weights(features, weights, "weighted head");
  return head(gap(mul(detach(weights), relu(features))));
}

template <typename S>
TensorT<S> consensus_loss(const LinearHeadT<S>& student_head, const TensorT<S>& fs_last, const TensorT<S>& weights,
                          std::span<const Label> labels) {
  return ce_loss(weighted_head_logits(student_head, fs_last, weights), labels);
}

template <typename S>
TensorT<S> divergence_loss(const LinearHeadT<S>& teacher_head, const TensorT<S>& ft_last, const TensorT<S>& weights,
                           std::span<const Label> labels) {
  return ce_loss(weighted_head_logits(teacher_head, ft_last, weights), labels);
}

template <typename S>
TensorT<S> adm_loss(const TensorT<S>& co, const TensorT<S>& di, double alpha, double beta) {
  return add(mul_scalar(co, static_cast<S>(alpha)), mul_scalar(di, static_cast<S>(beta)));
}

template <typename S>
TensorT<S> feature_mse_loss(std::span<const TensorT<S>> fs, std::span<const TensorT<S>> ft,
                            std::span<const AdapterT<S>> adapters, FeatVariant variant) {
  if (fs.size() != ft.size() || adapters.size() != fs.size()) {
    throw PairingError("feature loss: " + std::to_string(fs.size()) + " student stages, " +
                       std::to_string(ft.size()) + " teacher stages, " + std::to_string(adapters.size()) +
                       " adapters");
  }
  if (fs.size() < 2) throw PairingError("feature loss: needs at least 2 stages, got " + std::to_string(fs.size()));
  const std::size_t stages = fs.size();
  TensorT<S> total;
  for (std::size_t idx = 1; idx < stages; ++idx) {
    auto a = adapt(adapters[idx], fs[idx]);
    auto b = detach(ft[idx]);
    if (a.shape() != b.shape()) {
      throw PairingError("feature loss: stage " + std::to_string(idx) + " adapted student " + to_string(a.shape()) +
                         " vs teacher " + to_string(b.shape()));
    }
    TensorT<S> stage;
    switch (variant) {
      case FeatVariant::Plain: stage = mean(square(sub(a, b))); break;
      case FeatVariant::Norm: stage = mean(square(sub(channel_normalize(a), channel_normalize(b)))); break;
      case FeatVariant::Relu: stage = mean(square(sub(relu(a), relu(b)))); break;
      case FeatVariant::DropThird: stage = drop_third_mse(a, b); break;
    }
    const double weight = 1.0 / std::ldexp(1.0, static_cast<int>(stages - idx));
    stage = mul_scalar(stage, static_cast<S>(weight));
    total = idx == 1 ? stage : add(total, stage);
  }
  return total;
}

template <typename S>
TensorT<S> adm_kd_consensus(const TensorT<S>& student_logits, const TensorT<S>& teacher_logits, double tau) {
  return kd_loss(student_logits, teacher_logits, tau);
}

template <typename S>
TensorT<S> adm_kd_divergence(const TensorT<S>& teacher_logits, std::span<const Label> labels,
                             const TeacherPredictionCache& cache, std::span<const std::size_t> indices, double delta,
                             double tau) {
  check_labels(teacher_logits, labels);
  if (!(delta >= 0.0 && delta <= 1.0)) throw ParameterError("delta must lie in [0, 1], got " + num(delta));
  const std::size_t batch = teacher_logits.shape()[0], classes = teacher_logits.shape()[1];
  auto target = one_hot<S>(labels, classes);
  if (!cache.empty() && delta > 0.0) {
    if (indices.size() != batch) {
      throw CacheError("teacher cache: " + std::to_string(indices.size()) + " sample indices for batch of " +
                       std::to_string(batch));
    }
    if (cache.num_classes() != classes) {
      throw CacheError("teacher cache: holds " + std::to_string(cache.num_classes()) + " classes, logits have " +
                       std::to_string(classes));
    }
    auto q = target.mutable_values();
    for (std::size_t b = 0; b < batch; ++b) {
      const auto prev = cache.at(indices[b]);
      for (std::size_t c = 0; c < classes; ++c) {
        auto& v = q[b * classes + c];
        v = static_cast<S>((1.0 - delta) * static_cast<double>(v) + delta * static_cast<double>(prev[c]));
      }
    }
  }
  return kd_to_target(teacher_logits, target, tau);
}

template <typename S>
SimilarityStats similarity_stats(const TensorT<S>& weights) {
  const auto v = weights.values();
  if (v.empty()) return {};
  SimilarityStats s;
  s.min = s.max = static_cast<double>(v[0]);
  double total = 0.0;
  for (auto x : v) {
    s.min = std::min(s.min, static_cast<double>(x));
    s.max = std::max(s.max, static_cast<double>(x));
    total += static_cast<double>(x);
  }
  const double m = total / static_cast<double>(v.size());
  double sq = 0.0;
  for (auto x : v) sq += (static_cast<double>(x) - m) * (static_cast<double>(x) - m);
  s.variance = sq / static_cast<double>(v.size());
  return s;
}

template <typename S>
Diagnostics diagnostics(const LinearHeadT<S>& student_head, const LinearHeadT<S>& teacher_head,
                        const TensorT<S>& fs_last, const TensorT<S>& ft_last, const TensorT<S>& co_weights,
                        const TensorT<S>& di_weights, std::span<const Label> labels, double tau) {
  NoGradGuard guard;
  Diagnostics d;
  const auto zs = weighted_head_logits(student_head, fs_last, co_weights);
  const auto zt = weighted_head_logits(teacher_head, ft_last, co_weights);
  d.collaborative_kl = static_cast<double>(kd_loss(zs, zt, tau).item());
  const auto weighted = ce_loss(weighted_head_logits(teacher_head, ft_last, di_weights), labels);
  const auto plain = ce_loss(teacher_head(gap(ft_last)), labels);
  d.divergence_ce_gap = static_cast<double>(weighted.item()) - static_cast<double>(plain.item());
  return d;
}

template <typename S>
AdmTerms<S> adm_terms(const PairOutputs<S>& pair, const AdapterT<S>& last_adapter, std::span<const Label> labels,
                      const DistillConfig& config, const SoftTargetContext& soft) {
  if (pair.student_features.empty() || pair.teacher_features.empty()) {
    throw PairingError("adm: both models must expose feature taps");
  }
  const auto& fs_last = pair.student_features.back();
  const auto& ft_last = pair.teacher_features.back();
  AdmTerms<S> out;
  {
    NoGradGuard guard;
    out.similarity = similarity_map(adapt(last_adapter, fs_last), ft_last);
  }
  out.co_weights = consensus_weights(out.similarity, config.eps);
  out.di_weights = divergence_weights(out.similarity, config.eps);

  if (config.adm_form == AdmForm::CeCe) {
    out.co = consensus_loss(pair.student_head, fs_last, out.co_weights, labels);
  } else {
    out.co = adm_kd_consensus(weighted_head_logits(pair.student_head, fs_last, out.co_weights),
                              weighted_head_logits(pair.teacher_head, ft_last, out.co_weights), config.tau);
  }
  if (config.adm_form == AdmForm::KdKd) {
    static const TeacherPredictionCache empty;
    out.di = adm_kd_divergence(weighted_head_logits(pair.teacher_head, ft_last, out.di_weights), labels,
                               soft.cache ? *soft.cache : empty, soft.indices, soft.delta, config.tau);
  } else {
    out.di = divergence_loss(pair.teacher_head, ft_last, out.di_weights, labels);
  }
  return out;
}

template <typename S>
LossBreakdown<S> total_loss(const PairOutputs<S>& pair, std::span<const AdapterT<S>> adapters,
                            std::span<const Label> labels, const DistillConfig& config,
                            const SoftTargetContext& soft) {
  if (adapters.empty()) throw PairingError("total loss: no adapters");
  LossBreakdown<S> out;
  const std::vector<TensorT<S>> logits{pair.student_logits, pair.teacher_logits};
  out.dml = dml_loss<S>(logits, labels, config.lambda, config.tau);
  out.feat = feature_mse_loss<S>(pair.student_features, pair.teacher_features, adapters, config.feat_variant);
  out.adm = adm_terms(pair, adapters.back(), labels, config, soft);
  out.adm_weighted = adm_loss(out.adm.co, out.adm.di, config.alpha, config.beta);
  out.total = out.dml.total;
  if (config.gamma != 0.0) out.total = add(out.total, mul_scalar(out.feat, static_cast<S>(config.gamma)));
  if (config.alpha != 0.0 || config.beta != 0.0) out.total = add(out.total, out.adm_weighted);
  return out;
}

#define ADMKD_INSTANTIATE_LOSSES(S)                                                                                   \
  template TensorT<S> ce_loss(const TensorT<S>&, std::span<const Label>);                                            \
  template TensorT<S> kd_loss(const TensorT<S>&, const TensorT<S>&, double);                                         \
  template TensorT<S> kd_to_target(const TensorT<S>&, const TensorT<S>&, double);                                    \
  template DmlResult<S> dml_loss(std::span<const TensorT<S>>, std::span<const Label>, double, double);               \
  template SimilarityMapT<S> similarity_map(const TensorT<S>&, const TensorT<S>&);                                   \
  template TensorT<S> consensus_weights(const SimilarityMapT<S>&, double);                                           \
  template TensorT<S> divergence_weights(const SimilarityMapT<S>&, double);                                          \
  template TensorT<S> weighted_head_logits(const LinearHeadT<S>&, const TensorT<S>&, const TensorT<S>&);             \
  template TensorT<S> consensus_loss(const LinearHeadT<S>&, const TensorT<S>&, const TensorT<S>&,                    \
                                     std::span<const Label>);                                                        \
  template TensorT<S> divergence_loss(const LinearHeadT<S>&, const TensorT<S>&, const TensorT<S>&,                   \
                                      std::span<const Label>);                                                       \
  template TensorT<S> adm_loss(const TensorT<S>&, const TensorT<S>&, double, double);                                \
  template TensorT<S> feature_mse_loss(std::span<const TensorT<S>>, std::span<const TensorT<S>>,                     \
                                       std::span<const AdapterT<S>>, FeatVariant);                                   \
  template TensorT<S> adm_kd_consensus(const TensorT<S>&, const TensorT<S>&, double);                                \
  template TensorT<S> adm_kd_divergence(const TensorT<S>&, std::span<const Label>, const TeacherPredictionCache&,    \
                                        std::span<const std::size_t>, double, double);                               \
  template SimilarityStats similarity_stats(const TensorT<S>&);                                                      \
  template Diagnostics diagnostics(const LinearHeadT<S>&, const LinearHeadT<S>&, const TensorT<S>&,                 \
                                   const TensorT<S>&, const TensorT<S>&, const TensorT<S>&, std::span<const Label>,  \
                                   double);                                                                          \
  template AdmTerms<S> adm_terms(const PairOutputs<S>&, const AdapterT<S>&, std::span<const Label>,                  \
                                 const DistillConfig&, const SoftTargetContext&);                                    \
  template LossBreakdown<S> total_loss(const PairOutputs<S>&, std::span<const AdapterT<S>>, std::span<const Label>, \
                                       const DistillConfig&, const SoftTargetContext&);

ADMKD_INSTANTIATE_LOSSES(float)
ADMKD_INSTANTIATE_LOSSES(double)

}  // namespace admkd
