#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "admkd/ops.hpp"
#include "admkd/random.hpp"

namespace admkd {

enum class Norm { BatchNorm, None };

inline constexpr float kBatchNormEps = 1e-5f;
inline constexpr float kBatchNormMomentum = 0.1f;

/// Staged convolutional classifier description. Every stage after the first
/// starts with a 2×2 stride-2 convolution; all other convolutions are 3×3
/// with unit padding. Each stage's last activation is a feature tap.
struct ModelSpec {
  std::string name;
  std::vector<std::size_t> stage_widths;
  std::size_t blocks_per_stage = 1;
  std::array<std::size_t, 3> input_shape{1, 16, 16};  // C, H, W
  std::size_t num_classes = 10;
  Norm norm = Norm::BatchNorm;
  bool classifier_bias = true;

  /// Throws SpecError for empty widths, zero extents or inputs that do not
  /// halve cleanly at every stage boundary.
  void validate() const;
  /// C×H×W at each feature tap.
  std::vector<std::array<std::size_t, 3>> tap_shapes() const;

  bool operator==(const ModelSpec&) const = default;
};

/// Teacher family: widths [32, 64, 128], two blocks per stage.
ModelSpec tiny_a(std::array<std::size_t, 3> input_shape, std::size_t num_classes);
/// Student family: widths [16, 32, 64], one block per stage.
ModelSpec tiny_b(std::array<std::size_t, 3> input_shape, std::size_t num_classes);

/// Throws PairingError unless both specs tap equal spatial extents at every stage.
void check_pairable(const ModelSpec& student, const ModelSpec& teacher);

/// Linear classifier W·x (+ b) applied to pooled features.
template <typename S>
struct LinearHeadT {
  TensorT<S> weight;  // [classes × channels]
  std::optional<TensorT<S>> bias;

  TensorT<S> operator()(const TensorT<S>& pooled) const { return linear(pooled, weight, bias); }
};
using LinearHead = LinearHeadT<float>;

/// 1×1 convolution mapping student channels to teacher channels.
template <typename S>
struct AdapterT {
  TensorT<S> weight;  // [Ct × Cs × 1 × 1]

  std::size_t in_channels() const { return weight.shape()[1]; }
  std::size_t out_channels() const { return weight.shape()[0]; }

  static AdapterT identity(std::size_t channels);
  static AdapterT zeros(std::size_t in_channels, std::size_t out_channels);
  static AdapterT kaiming(std::size_t in_channels, std::size_t out_channels, Rng& rng);
};
using Adapter = AdapterT<float>;

template <typename S>
TensorT<S> adapt(const AdapterT<S>& adapter, const TensorT<S>& fs);

extern template struct AdapterT<float>;
extern template struct AdapterT<double>;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ForwardResult {
  std::vector<Tensor> features;  // post-activation stage taps, B×C×H×W
  Tensor pooled;                 // gap(features.back())
  Tensor logits;                 // head(pooled)
};

class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// Train mode normalises with batch statistics and updates running
  /// statistics; eval mode uses running statistics and mutates nothing.
  ForwardResult forward(const Tensor& x, bool train);

  const ModelSpec& spec() const { return spec_; }
  LinearHead head() const { return head_; }
  const std::vector<NamedTensor>& parameters() const { return parameters_; }
  const std::vector<NamedTensor>& buffers() const { return buffers_; }
  /// Parameters followed by buffers, in a fixed order.
  std::vector<NamedTensor> state() const;
  std::size_t parameter_count() const;

  void zero_grad();
  void set_trainable(bool trainable);
  /// FNV-1a over the bytes of every parameter and buffer.
  std::uint64_t checksum() const;
  Model clone() const;

 private:
  struct Block {
    Tensor weight;
    std::optional<Tensor> bias;
    Tensor gamma, beta, running_mean, running_var;
    std::size_t stride = 1, pad = 1;
  };

  Model() = default;
  void index_tensors();

  ModelSpec spec_;
  std::vector<std::vector<Block>> stages_;
  LinearHead head_;
  std::vector<NamedTensor> parameters_;
  std::vector<NamedTensor> buffers_;
};

inline Model build_model(const ModelSpec& spec, std::uint64_t seed) { return Model(spec, seed); }
inline ForwardResult forward(Model& model, const Tensor& x, bool train) { return model.forward(x, train); }

std::uint64_t checksum(std::span<const NamedTensor> tensors);

}  // namespace admkd
