#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "admkd/tensor.hpp"

namespace admkd {

enum class MaskSource { Cam, Similarity, Reference };

struct ThresholdRule {
  enum class Kind { FracOfMax, MeanSplit };
  Kind kind = Kind::FracOfMax;
  double t = 0.5;

  static ThresholdRule frac_of_max(double t = 0.5) { return {Kind::FracOfMax, t}; }
  static ThresholdRule mean_split() { return {Kind::MeanSplit, 0.0}; }
};

struct RegionMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;  // row-major, 0 or 1
  MaskSource source = MaskSource::Cam;
  double threshold = 0.0;  // the cut actually applied

  std::size_t count() const;
  bool operator==(const RegionMask&) const = default;
};

/// Σ_k w_k·F_k over a C×H×W feature map; returns H×W.
template <typename S>
TensorT<S> cam(const TensorT<S>& features, std::span<const S> weights);

/// frac-of-max keeps map ≥ t·max(map); mean-split keeps map ≥ mean(map).
template <typename S>
RegionMask threshold_mask(const TensorT<S>& map, ThresholdRule rule, MaskSource source = MaskSource::Cam);

/// |a∩b| / |a∪b|, 1 when both are empty. Throws DimensionError on a shape mismatch.
double miou(const RegionMask& a, const RegionMask& b);

/// Mean-split of one H×W similarity map and its complement.
template <typename S>
std::pair<RegionMask, RegionMask> similarity_regions(const TensorT<S>& similarity);

struct CurvePoint {
  std::size_t epoch = 0;
  std::string metric;
  double value = 0.0;

  bool operator==(const CurvePoint&) const = default;
};

/// CSV `epoch,metric,value` sorted by (metric, epoch). Throws PathError on IO
/// failure and AnalysisError for non-finite values.
void emit_curves(std::vector<CurvePoint> points, const std::filesystem::path& path);

/// Reads curve files and per-epoch metric tables (`epoch,model,<columns>…`);
/// a table cell becomes the point (epoch, "<model>/<column>", value).
std::vector<CurvePoint> read_curves(const std::filesystem::path& path);

/// Binary greymap, 0 or 255 per pixel.
void write_pgm(const RegionMask& mask, const std::filesystem::path& path);
RegionMask read_pgm(const std::filesystem::path& path);

struct SimilarityStatRow {
  std::size_t epoch = 0;
  double min = 0.0;
  double max = 0.0;
  double variance = 0.0;
};

/// CSV `epoch,min,max,variance`.
void write_similarity_table(const std::vector<SimilarityStatRow>& rows, const std::filesystem::path& path);

}  // namespace admkd
