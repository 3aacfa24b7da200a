#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "admkd/nn.hpp"

namespace admkd {

using Label = std::int32_t;

/// Which losses stand in for L_co and L_di: both cross-entropy, KD consensus
/// with CE divergence, or KD for both (soft target mixing in the teacher's
/// previous-epoch predictions).
enum class AdmForm { CeCe, KdCe, KdKd };

/// Transform applied to feature pairs before the distillation MSE.
enum class FeatVariant { Plain, Norm, Relu, DropThird };

enum class RunMode { Online, Offline, Multi, Independent };

std::string to_string(AdmForm form);
std::string to_string(FeatVariant variant);
std::string to_string(RunMode mode);
std::optional<AdmForm> parse_adm_form(const std::string& text);
std::optional<FeatVariant> parse_feat_variant(const std::string& text);
std::optional<RunMode> parse_run_mode(const std::string& text);

struct DistillConfig {
  double tau = 1.0;
  double lambda = 1.0;
  double alpha = 0.2;
  double beta = 0.6;
  double gamma = 0.01;
  double eps = 1e-5;
  AdmForm adm_form = AdmForm::KdCe;
  FeatVariant feat_variant = FeatVariant::Plain;
  double delta_start = 0.2;
  double delta_end = 0.6;
  RunMode mode = RunMode::Online;

  /// Throws ConfigError naming the offending field.
  void validate() const;

  static DistillConfig imagenet_like();
  static DistillConfig cifar_like();

  bool operator==(const DistillConfig&) const = default;
};

/// Ramp of the soft-target trust δ from start (epoch 0) through the midpoint
/// (epoch epochs/2) to end (epoch epochs−1), exact at all three. Linear on
/// each side of epochs/2.
double delta_at(double start, double end, std::size_t epoch, std::size_t epochs);

/// Per-location channel cosine similarity between paired feature maps.
/// Always detached.
template <typename S>
struct SimilarityMapT {
  TensorT<S> values;  // [B × H × W]
  TensorT<S> mean;    // [B], spatial mean per sample
};
using SimilarityMap = SimilarityMapT<float>;

/// Softened teacher predictions from the previous epoch, keyed by sample index.
/// Writes go to a pending table that becomes visible on commit().
class TeacherPredictionCache {
 public:
  explicit TeacherPredictionCache(std::size_t num_classes = 0) : num_classes_(num_classes) {}

  bool empty() const { return current_.empty(); }
  std::size_t size() const { return current_.size(); }
  std::size_t num_classes() const { return num_classes_; }

  /// Throws CacheError unless the row is a distribution over num_classes.
  void stage(std::size_t index, std::span<const float> probabilities);
  void commit();
  bool contains(std::size_t index) const { return current_.contains(index); }
  /// Throws CacheError for a missing index.
  std::span<const float> at(std::size_t index) const;
  const std::map<std::size_t, std::vector<float>>& entries() const { return current_; }
  void restore(std::map<std::size_t, std::vector<float>> entries);

 private:
  std::size_t num_classes_;
  std::map<std::size_t, std::vector<float>> current_;
  std::map<std::size_t, std::vector<float>> pending_;
};

/// Mean cross-entropy via log-sum-exp. Throws LabelError for labels outside [0, C).
template <typename S>
TensorT<S> ce_loss(const TensorT<S>& logits, std::span<const Label> labels);

/// τ²·mean_b KL(σ(teacher/τ) ‖ σ(student/τ)). The teacher side is detached
/// here, so gradient reaches the student logits only.
template <typename S>
TensorT<S> kd_loss(const TensorT<S>& student, const TensorT<S>& teacher, double tau);

/// τ²·mean_b KL(target ‖ σ(logits/τ)) for a fixed target distribution per row.
template <typename S>
TensorT<S> kd_to_target(const TensorT<S>& logits, const TensorT<S>& target, double tau);

template <typename S>
struct DmlResult {
  std::vector<TensorT<S>> ce;         // per model
  std::vector<TensorT<S>> kd;         // per model, mean over peers (unweighted)
  std::vector<TensorT<S>> per_model;  // ce + λ·kd
  TensorT<S> total;
};

/// Deep mutual learning over M ≥ 2 peers; each model treats the others as
/// detached targets.
template <typename S>
DmlResult<S> dml_loss(std::span<const TensorT<S>> logits, std::span<const Label> labels, double lambda,
                      double tau);

template <typename S>
SimilarityMapT<S> similarity_map(const TensorT<S>& fs, const TensorT<S>& ft);

/// (1 + S) / (1 + S̄ + ε) per sample, shaped [B × 1 × H × W]; detached.
template <typename S>
TensorT<S> consensus_weights(const SimilarityMapT<S>& s, double eps);

/// (1 − S) / (mean(1 − S) + ε) per sample, shaped [B × 1 × H × W]; detached.
template <typename S>
TensorT<S> divergence_weights(const SimilarityMapT<S>& s, double eps);

/// head(gap(weights ⊙ relu(features))).
template <typename S>
TensorT<S> weighted_head_logits(const LinearHeadT<S>& head, const TensorT<S>& features, const TensorT<S>& weights);

/// Student classification loss on consensus-weighted penultimate features.
template <typename S>
TensorT<S> consensus_loss(const LinearHeadT<S>& student_head, const TensorT<S>& fs_last, const TensorT<S>& weights,
                          std::span<const Label> labels);

/// Teacher classification loss on divergence-weighted penultimate features.
template <typename S>
TensorT<S> divergence_loss(const LinearHeadT<S>& teacher_head, const TensorT<S>& ft_last, const TensorT<S>& weights,
                           std::span<const Label> labels);

template <typename S>
TensorT<S> adm_loss(const TensorT<S>& co, const TensorT<S>& di, double alpha, double beta);

/// Stage-weighted feature MSE over stages 1..N−1 (weight 1/2^(N−idx)) between
/// adapt(fs[idx]) and detach(ft[idx]).
template <typename S>
TensorT<S> feature_mse_loss(std::span<const TensorT<S>> fs, std::span<const TensorT<S>> ft,
                            std::span<const AdapterT<S>> adapters, FeatVariant variant);

/// KD between consensus-weighted student and (detached) teacher head logits.
template <typename S>
TensorT<S> adm_kd_consensus(const TensorT<S>& student_logits, const TensorT<S>& teacher_logits, double tau);

/// KD of the divergence-weighted teacher head logits towards
/// (1−δ)·onehot(y) + δ·p_prev. An empty cache means δ = 0.
template <typename S>
TensorT<S> adm_kd_divergence(const TensorT<S>& teacher_logits, std::span<const Label> labels,
                             const TeacherPredictionCache& cache, std::span<const std::size_t> indices, double delta,
                             double tau);

struct SimilarityStats {
  double min = 0.0;
  double max = 0.0;
  double variance = 0.0;  // population
};

template <typename S>
SimilarityStats similarity_stats(const TensorT<S>& weights);

struct Diagnostics {
  /// KL between head logits of consensus-weighted features of both models.
  double collaborative_kl = 0.0;
  /// Divergence-weighted teacher CE minus plain GAP teacher CE.
  double divergence_ce_gap = 0.0;
};

template <typename S>
Diagnostics diagnostics(const LinearHeadT<S>& student_head, const LinearHeadT<S>& teacher_head,
                        const TensorT<S>& fs_last, const TensorT<S>& ft_last, const TensorT<S>& co_weights,
                        const TensorT<S>& di_weights, std::span<const Label> labels, double tau);

/// What a forward pass of one student/teacher pair produced.
template <typename S>
struct PairOutputs {
  std::vector<TensorT<S>> student_features;
  std::vector<TensorT<S>> teacher_features;
  TensorT<S> student_logits;
  TensorT<S> teacher_logits;
  LinearHeadT<S> student_head;
  LinearHeadT<S> teacher_head;
};

/// Inputs needed only by the kd-kd form.
struct SoftTargetContext {
  const TeacherPredictionCache* cache = nullptr;
  std::span<const std::size_t> indices;
  double delta = 0.0;
};

template <typename S>
struct AdmTerms {
  SimilarityMapT<S> similarity;
  TensorT<S> co_weights;
  TensorT<S> di_weights;
  TensorT<S> co;  // unweighted
  TensorT<S> di;  // unweighted
};

/// Similarity (student side adapted by the last adapter) plus the configured
/// forms of L_co and L_di for one pair.
template <typename S>
AdmTerms<S> adm_terms(const PairOutputs<S>& pair, const AdapterT<S>& last_adapter, std::span<const Label> labels,
                      const DistillConfig& config, const SoftTargetContext& soft = {});

template <typename S>
struct LossBreakdown {
  DmlResult<S> dml;  // models ordered [student, teacher]
  TensorT<S> feat;
  AdmTerms<S> adm;
  TensorT<S> adm_weighted;  // α·co + β·di
  TensorT<S> total;
};

/// L_dml + γ·L_feat + α·L_co + β·L_di for an online student/teacher pair.
/// Terms whose weight is zero are evaluated for reporting but left out of
/// the total, so switching them off reproduces the baseline bit for bit.
template <typename S>
LossBreakdown<S> total_loss(const PairOutputs<S>& pair, std::span<const AdapterT<S>> adapters,
                            std::span<const Label> labels, const DistillConfig& config,
                            const SoftTargetContext& soft = {});

}  // namespace admkd
