#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "admkd/losses.hpp"

namespace admkd {

enum class Split { Train, Test };

std::string to_string(Split split);

struct Dataset {
  Tensor images;  // N × C × H × W, values in [0, 1]
  std::vector<Label> labels;
  std::size_t num_classes = 0;
  Split split = Split::Train;
  std::string name;

  std::size_t size() const { return labels.size(); }
  std::array<std::size_t, 3> sample_shape() const;
  /// Throws DataError when any invariant is broken.
  void validate() const;
};

/// FNV-1a over image bytes, labels and the class count.
std::uint64_t checksum(const Dataset& ds);

/// Rows of `ds` in the given order.
Dataset subset(const Dataset& ds, std::span<const std::size_t> indices);

struct Batch {
  Tensor images;
  std::vector<Label> labels;
  std::vector<std::size_t> indices;  // positions in the source dataset
};

Batch gather(const Dataset& ds, std::span<const std::size_t> indices);

/// Each class is a Gaussian bump centred in its own cell of a ⌈√K⌉×⌈√K⌉ grid
/// (the four quadrants for K ≤ 4), replicated over channels, plus per-pixel
/// Gaussian noise and clamping to [0, 1]. Sample n has class n mod K.
Dataset synth_blobs(std::size_t classes, std::size_t per_class, std::array<std::size_t, 3> shape, double noise_sigma,
                    std::uint64_t seed, Split split = Split::Train);

/// Noise-free template of one class, C × H × W.
Tensor blob_template(std::size_t cls, std::size_t classes, std::array<std::size_t, 3> shape);

/// IDX files: big-endian header, unsigned bytes scaled by 1/255.
/// Images use magic 0x00000803 (N×H×W) or 0x00000804 (N×C×H×W);
/// labels use 0x00000801.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, Split split = Split::Train);
void save_idx(const Dataset& ds, const std::filesystem::path& images, const std::filesystem::path& labels);

/// CSV rows `label,p0,p1,…` with pixels in [0, 1] in C×H×W order; an optional
/// header row is skipped.
Dataset load_csv(const std::filesystem::path& path, std::array<std::size_t, 3> shape, Split split = Split::Train);
void save_csv(const Dataset& ds, const std::filesystem::path& path);

struct AugmentPolicy {
  std::size_t pad = 4;
  std::size_t crop_h = 0;  // 0 keeps the input extent
  std::size_t crop_w = 0;
  double hflip_prob = 0.5;
  bool enabled = true;

  /// Throws ConfigError for a crop larger than the padded input or a
  /// probability outside [0, 1].
  void validate(std::size_t height, std::size_t width) const;
  bool operator==(const AugmentPolicy&) const = default;
};

/// Zero-pad, random crop and random horizontal flip. Each sample draws from
/// its own stream seeded by (seed, index), so results do not depend on batch
/// composition.
Tensor augment(const Tensor& batch, const AugmentPolicy& policy, std::uint64_t seed,
               std::span<const std::size_t> indices);

/// Resamples exactly ⌊fraction·N⌋ labels, each to a different class.
Dataset corrupt_labels(const Dataset& ds, double fraction, std::uint64_t seed);

/// Index batches for one epoch; the permutation depends only on (seed, epoch)
/// and the last partial batch is kept.
std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                              std::uint64_t epoch);

}  // namespace admkd
