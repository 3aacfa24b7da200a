#include "admkd/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "admkd/errors.hpp"

namespace admkd {

namespace fs = std::filesystem;

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& text, const fs::path& path, std::size_t line) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size())
    throw FormatError(path.string() + ":" + std::to_string(line) + ": not a number: '" + text + "'");
  return v;
}

std::size_t parse_epoch(const std::string& text, const fs::path& path, std::size_t line) {
  const double v = parse_number(text, path, line);
  if (v < 0 || v != std::floor(v)) throw FormatError(path.string() + ":" + std::to_string(line) + ": bad epoch");
  return static_cast<std::size_t>(v);
}

}  // namespace

std::size_t RegionMask::count() const { return static_cast<std::size_t>(std::count(values.begin(), values.end(), 1)); }

template <typename S>
TensorT<S> cam(const TensorT<S>& features, std::span<const S> weights) {
  if (features.rank() != 3) throw DimensionError("cam: features must be C×H×W");
  const std::size_t c = features.shape()[0], h = features.shape()[1], w = features.shape()[2];
  if (weights.size() != c) throw DimensionError("cam: " + std::to_string(weights.size()) + " weights for " +
                                                std::to_string(c) + " channels");
  using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const Matrix> f(features.values().data(), static_cast<Eigen::Index>(c),
                                   static_cast<Eigen::Index>(h * w));
  const Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> row(weights.data(), static_cast<Eigen::Index>(c));
  const Eigen::Matrix<S, 1, Eigen::Dynamic> out = row * f;
  return TensorT<S>({h, w}, std::vector<S>(out.data(), out.data() + out.size()));
}

template <typename S>
RegionMask threshold_mask(const TensorT<S>& map, ThresholdRule rule, MaskSource source) {
  if (map.rank() != 2) throw DimensionError("threshold_mask: map must be H×W");
  const auto v = map.values();
  if (v.empty()) throw DimensionError("threshold_mask: empty map");
  double cut = 0.0;
  if (rule.kind == ThresholdRule::Kind::FracOfMax) {
    cut = rule.t * static_cast<double>(*std::max_element(v.begin(), v.end()));
  } else {
    double sum = 0.0;
    for (S x : v) sum += static_cast<double>(x);
    cut = sum / static_cast<double>(v.size());
  }
  RegionMask m{map.shape()[0], map.shape()[1], {}, source, cut};
  m.values.reserve(v.size());
  for (S x : v) m.values.push_back(static_cast<double>(x) >= cut ? 1 : 0);
  return m;
}

double miou(const RegionMask& a, const RegionMask& b) {
  if (a.height != b.height || a.width != b.width || a.values.size() != b.values.size())
    throw DimensionError("miou: masks have different shapes");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    inter += a.values[i] && b.values[i];
    uni += a.values[i] || b.values[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

template <typename S>
std::pair<RegionMask, RegionMask> similarity_regions(const TensorT<S>& similarity) {
  auto similar = threshold_mask(similarity, ThresholdRule::mean_split(), MaskSource::Similarity);
  auto discrepancy = similar;
  for (auto& v : discrepancy.values) v = v ? 0 : 1;
  return {std::move(similar), std::move(discrepancy)};
}

void emit_curves(std::vector<CurvePoint> points, const fs::path& path) {
  for (const auto& p : points)
    if (!std::isfinite(p.value)) throw AnalysisError("emit_curves: non-finite value for " + p.metric);
  std::stable_sort(points.begin(), points.end(), [](const CurvePoint& a, const CurvePoint& b) {
    return std::tie(a.metric, a.epoch) < std::tie(b.metric, b.epoch);
  });
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PathError(path.string() + ": cannot write");
  out << "epoch,metric,value\n";
  for (const auto& p : points) out << p.epoch << ',' << p.metric << ',' << format_double(p.value) << '\n';
  if (!out) throw PathError(path.string() + ": write failed");
}

std::vector<CurvePoint> read_curves(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw PathError(path.string() + ": cannot open");
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header");
  const auto header = split_csv(line);
  const bool long_form = header == std::vector<std::string>{"epoch", "metric", "value"};
  if (!long_form && (header.size() < 3 || header[0] != "epoch" || header[1] != "model"))
    throw FormatError(path.string() + ": unrecognised header");
  std::vector<CurvePoint> out;
  for (std::size_t n = 2; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size())
      throw FormatError(path.string() + ":" + std::to_string(n) + ": expected " + std::to_string(header.size()) +
                        " fields");
    const auto epoch = parse_epoch(cells[0], path, n);
    if (long_form) {
      out.push_back({epoch, cells[1], parse_number(cells[2], path, n)});
    } else {
      for (std::size_t c = 2; c < cells.size(); ++c)
        out.push_back({epoch, cells[1] + "/" + header[c], parse_number(cells[c], path, n)});
    }
  }
  return out;
}

void write_pgm(const RegionMask& mask, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PathError(path.string() + ": cannot write");
  out << "P5\n" << mask.width << ' ' << mask.height << "\n255\n";
  for (auto v : mask.values) out.put(static_cast<char>(v ? 255 : 0));
  if (!out) throw PathError(path.string() + ": write failed");
}

RegionMask read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PathError(path.string() + ": cannot open");
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  in.get();
  if (magic != "P5" || maxval != 255 || !in) throw FormatError(path.string() + ": not an 8-bit P5 greymap");
  RegionMask m{h, w, std::vector<std::uint8_t>(w * h), MaskSource::Cam, 0.0};
  for (auto& v : m.values) {
    const int c = in.get();
    if (c == EOF) throw FormatError(path.string() + ": truncated pixel data");
    v = c ? 1 : 0;
  }
  return m;
}

void write_similarity_table(const std::vector<SimilarityStatRow>& rows, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PathError(path.string() + ": cannot write");
  out << "epoch,min,max,variance\n";
  for (const auto& r : rows)
    out << r.epoch << ',' << format_double(r.min) << ',' << format_double(r.max) << ',' << format_double(r.variance)
        << '\n';
}

#define ADMKD_INSTANTIATE_ANALYSIS(S)                                                   \
  template TensorT<S> cam(const TensorT<S>&, std::span<const S>);                       \
  template RegionMask threshold_mask(const TensorT<S>&, ThresholdRule, MaskSource);     \
  template std::pair<RegionMask, RegionMask> similarity_regions(const TensorT<S>&);

ADMKD_INSTANTIATE_ANALYSIS(float)
ADMKD_INSTANTIATE_ANALYSIS(double)

}  // namespace admkd
