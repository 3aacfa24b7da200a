#include "admkd/nn.hpp"

#include <cmath>
#include <cstring>

namespace admkd {

void ModelSpec::validate() const {
  if (stage_widths.empty()) throw SpecError("model '" + name + "': stage widths must be non-empty");
  for (auto w : stage_widths)
    if (w == 0) throw SpecError("model '" + name + "': stage widths must be positive");
  if (blocks_per_stage == 0) throw SpecError("model '" + name + "': blocks per stage must be positive");
  if (num_classes == 0) throw SpecError("model '" + name + "': num classes must be positive");
  for (auto e : input_shape)
    if (e == 0) throw SpecError("model '" + name + "': input extents must be positive");
  const std::size_t factor = std::size_t{1} << (stage_widths.size() - 1);
  if (input_shape[1] % factor != 0 || input_shape[2] % factor != 0) {
    throw SpecError("model '" + name + "': input " + std::to_string(input_shape[1]) + "x" +
                    std::to_string(input_shape[2]) + " does not halve cleanly over " +
                    std::to_string(stage_widths.size()) + " stages");
  }
}

std::vector<std::array<std::size_t, 3>> ModelSpec::tap_shapes() const {
  std::vector<std::array<std::size_t, 3>> out;
  std::size_t h = input_shape[1], w = input_shape[2];
  for (std::size_t s = 0; s < stage_widths.size(); ++s) {
    if (s > 0) {
      h /= 2;
      w /= 2;
    }
    out.push_back({stage_widths[s], h, w});
  }
  return out;
}

ModelSpec tiny_a(std::array<std::size_t, 3> input_shape, std::size_t num_classes) {
  return ModelSpec{"tiny-a", {32, 64, 128}, 2, input_shape, num_classes, Norm::BatchNorm, true};
}

ModelSpec tiny_b(std::array<std::size_t, 3> input_shape, std::size_t num_classes) {
  return ModelSpec{"tiny-b", {16, 32, 64}, 1, input_shape, num_classes, Norm::BatchNorm, true};
}

void check_pairable(const ModelSpec& student, const ModelSpec& teacher) {
  const auto a = student.tap_shapes();
  const auto b = teacher.tap_shapes();
  if (a.size() != b.size()) {
    throw PairingError("pairing '" + student.name + "' with '" + teacher.name + "': stage counts differ (" +
                       std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  for (std::size_t s = 0; s < a.size(); ++s) {
    if (a[s][1] != b[s][1] || a[s][2] != b[s][2]) {
      throw PairingError("pairing '" + student.name + "' with '" + teacher.name + "': stage " + std::to_string(s) +
                         " spatial extents differ");
    }
  }
}

template <typename S>
AdapterT<S> AdapterT<S>::identity(std::size_t channels) {
  std::vector<S> w(channels * channels, S(0));
  for (std::size_t c = 0; c < channels; ++c) w[c * channels + c] = S(1);
  return {TensorT<S>({channels, channels, 1, 1}, std::move(w))};
}

template <typename S>
AdapterT<S> AdapterT<S>::zeros(std::size_t in_channels, std::size_t out_channels) {
  return {TensorT<S>::zeros({out_channels, in_channels, 1, 1})};
}

template <typename S>
AdapterT<S> AdapterT<S>::kaiming(std::size_t in_channels, std::size_t out_channels, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in_channels));
  auto w = rand_uniform<S>({out_channels, in_channels, 1, 1}, rng, -bound, bound);
  w.set_requires_grad(true);
  return {w};
}

template <typename S>
TensorT<S> adapt(const AdapterT<S>& adapter, const TensorT<S>& fs) {
  if (fs.rank() != 4 || fs.shape()[1] != adapter.in_channels()) {
    throw AdapterError("adapter: expects " + std::to_string(adapter.in_channels()) + " input channels, got shape " +
                       to_string(fs.shape()));
  }
  return conv2d(fs, adapter.weight, 1, 0);
}

template struct AdapterT<float>;
template struct AdapterT<double>;
template TensorT<float> adapt(const AdapterT<float>&, const TensorT<float>&);
template TensorT<double> adapt(const AdapterT<double>&, const TensorT<double>&);

namespace {

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  auto t = rand_uniform<float>(std::move(shape), rng, -bound, bound);
  t.set_requires_grad(true);
  return t;
}

Tensor trainable(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

}  // namespace

Model::Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(mix_seed(seed));
  std::size_t in_c = spec_.input_shape[0];
  for (std::size_t s = 0; s < spec_.stage_widths.size(); ++s) {
    const std::size_t out_c = spec_.stage_widths[s];
    std::vector<Block> blocks;
    for (std::size_t b = 0; b < spec_.blocks_per_stage; ++b) {
      Block block;
      const bool downsample = s > 0 && b == 0;
      const std::size_t k = downsample ? 2 : 3;
      block.stride = downsample ? 2 : 1;
      block.pad = downsample ? 0 : 1;
      block.weight = kaiming_uniform({out_c, in_c, k, k}, in_c * k * k, rng);
      if (spec_.norm == Norm::None) {
        block.bias = trainable(Tensor::zeros({out_c}));
      } else {
        block.gamma = trainable(Tensor::ones({out_c}));
        block.beta = trainable(Tensor::zeros({out_c}));
        block.running_mean = Tensor::zeros({out_c});
        block.running_var = Tensor::ones({out_c});
      }
      blocks.push_back(std::move(block));
      in_c = out_c;
    }
    stages_.push_back(std::move(blocks));
  }
  head_.weight = kaiming_uniform({spec_.num_classes, in_c}, in_c, rng);
  if (spec_.classifier_bias) head_.bias = trainable(Tensor::zeros({spec_.num_classes}));
  index_tensors();
}

void Model::index_tensors() {
  parameters_.clear();
  buffers_.clear();
  for (std::size_t s = 0; s < stages_.size(); ++s)
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      const std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(b) + ".";
      auto& block = stages_[s][b];
      parameters_.push_back({prefix + "conv.weight", block.weight});
      if (block.bias) parameters_.push_back({prefix + "conv.bias", *block.bias});
      if (spec_.norm == Norm::BatchNorm) {
        parameters_.push_back({prefix + "bn.weight", block.gamma});
        parameters_.push_back({prefix + "bn.bias", block.beta});
        buffers_.push_back({prefix + "bn.running_mean", block.running_mean});
        buffers_.push_back({prefix + "bn.running_var", block.running_var});
      }
    }
  parameters_.push_back({"fc.weight", head_.weight});
  if (head_.bias) parameters_.push_back({"fc.bias", *head_.bias});
}

ForwardResult Model::forward(const Tensor& x, bool train) {
  const auto& in = spec_.input_shape;
  if (x.rank() != 4 || x.shape()[1] != in[0] || x.shape()[2] != in[1] || x.shape()[3] != in[2]) {
    throw InputError("model '" + spec_.name + "': input shape " + to_string(x.shape()) + " does not match B×" +
                     std::to_string(in[0]) + "×" + std::to_string(in[1]) + "×" + std::to_string(in[2]));
  }
  ForwardResult result;
  Tensor h = x;
  for (auto& blocks : stages_) {
    for (auto& block : blocks) {
      h = conv2d(h, block.weight, block.stride, block.pad);
      const std::size_t channels = block.weight.shape()[0];
      if (block.bias) {
        h = add(h, reshape(*block.bias, {1, channels, 1, 1}));
      } else if (train) {
        std::vector<float> batch_mean, batch_var;
        h = batch_norm(h, block.gamma, block.beta, kBatchNormEps, &batch_mean, &batch_var);
        const float count = static_cast<float>(h.numel() / channels);
        const float unbias = count > 1 ? count / (count - 1) : 1.0f;
        auto rm = block.running_mean.mutable_values();
        auto rv = block.running_var.mutable_values();
        for (std::size_t c = 0; c < channels; ++c) {
          rm[c] = (1 - kBatchNormMomentum) * rm[c] + kBatchNormMomentum * batch_mean[c];
          rv[c] = (1 - kBatchNormMomentum) * rv[c] + kBatchNormMomentum * batch_var[c] * unbias;
        }
      } else {
        std::vector<float> shift(channels), scale(channels);
        for (std::size_t c = 0; c < channels; ++c) {
          scale[c] = 1.0f / std::sqrt(block.running_var.values()[c] + kBatchNormEps);
          shift[c] = -block.running_mean.values()[c] * scale[c];
        }
        const Tensor normalized =
            add(mul(h, Tensor({1, channels, 1, 1}, scale)), Tensor({1, channels, 1, 1}, shift));
        h = add(mul(normalized, reshape(block.gamma, {1, channels, 1, 1})), reshape(block.beta, {1, channels, 1, 1}));
      }
      h = relu(h);
    }
    result.features.push_back(h);
  }
  result.pooled = gap(h);
  result.logits = head_(result.pooled);
  return result;
}

std::vector<NamedTensor> Model::state() const {
  std::vector<NamedTensor> out = parameters_;
  out.insert(out.end(), buffers_.begin(), buffers_.end());
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters_) n += p.tensor.numel();
  return n;
}

void Model::zero_grad() {
  for (auto& p : parameters_) p.tensor.zero_grad();
}

void Model::set_trainable(bool trainable) {
  for (auto& p : parameters_) p.tensor.set_requires_grad(trainable);
}

std::uint64_t checksum(std::span<const NamedTensor> tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tensors) {
    const auto values = t.tensor.values();
    const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
    for (std::size_t i = 0; i < values.size() * sizeof(float); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::uint64_t Model::checksum() const {
  const auto all = state();
  return admkd::checksum(all);
}

Model Model::clone() const {
  Model copy;
  copy.spec_ = spec_;
  copy.stages_ = stages_;
  for (auto& blocks : copy.stages_)
    for (auto& block : blocks) {
      block.weight = block.weight.clone();
      if (block.bias) block.bias = block.bias->clone();
      if (spec_.norm == Norm::BatchNorm) {
        block.gamma = block.gamma.clone();
        block.beta = block.beta.clone();
        block.running_mean = block.running_mean.clone();
        block.running_var = block.running_var.clone();
      }
    }
  copy.head_.weight = head_.weight.clone();
  if (head_.bias) copy.head_.bias = head_.bias->clone();
  copy.index_tensors();
  return copy;
}

}  // namespace admkd
