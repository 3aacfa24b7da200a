#include "admkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace admkd {

namespace {

constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr std::uint32_t kIdxImages3 = 0x00000803;
constexpr std::uint32_t kIdxImages4 = 0x00000804;

std::string hex(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PathError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PathError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw PathError("short write to " + path.string());
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) {
    throw FormatError(path.string() + ": truncated at offset " + std::to_string(offset) + " (header needs " +
                      std::to_string(offset + 4) + " bytes, file has " + std::to_string(bytes.size()) + ")");
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::vector<unsigned char>& bytes, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) bytes.push_back(static_cast<unsigned char>((v >> shift) & 0xff));
}

void fnv(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

std::size_t infer_classes(const std::vector<Label>& labels) {
  Label top = 0;
  for (auto y : labels) top = std::max(top, y);
  return static_cast<std::size_t>(top) + 1;
}

}  // namespace

std::string to_string(Split split) { return split == Split::Train ? "train" : "test"; }

std::array<std::size_t, 3> Dataset::sample_shape() const {
  const auto& s = images.shape();
  return {s[1], s[2], s[3]};
}

void Dataset::validate() const {
  const std::string who = "dataset '" + name + "': ";
  if (images.rank() != 4) throw DataError(who + "images must be N×C×H×W, got " + to_string(images.shape()));
  if (labels.empty()) throw DataError(who + "no samples");
  if (images.shape()[0] != labels.size()) {
    throw DataError(who + std::to_string(images.shape()[0]) + " images but " + std::to_string(labels.size()) +
                    " labels");
  }
  if (num_classes == 0) throw DataError(who + "num classes must be positive");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw DataError(who + "label " + std::to_string(labels[i]) + " at sample " + std::to_string(i) +
                      " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
  for (float v : images.values())
    if (!std::isfinite(v)) throw DataError(who + "non-finite pixel value");
}

std::uint64_t checksum(const Dataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto v = ds.images.values();
  fnv(h, v.data(), v.size() * sizeof(float));
  fnv(h, ds.labels.data(), ds.labels.size() * sizeof(Label));
  const std::uint64_t k = ds.num_classes;
  fnv(h, &k, sizeof k);
  return h;
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  auto b = gather(ds, indices);
  return {b.images, std::move(b.labels), ds.num_classes, ds.split, ds.name};
}

Batch gather(const Dataset& ds, std::span<const std::size_t> indices) {
  const auto shape = ds.sample_shape();
  const std::size_t stride = shape[0] * shape[1] * shape[2];
  std::vector<float> pixels(indices.size() * stride);
  Batch b;
  b.labels.reserve(indices.size());
  const auto src = ds.images.values();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= ds.size()) {
      throw DataError("dataset '" + ds.name + "': sample index " + std::to_string(indices[i]) + " out of range");
    }
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[i] * stride), stride,
                pixels.begin() + static_cast<std::ptrdiff_t>(i * stride));
    b.labels.push_back(ds.labels[indices[i]]);
  }
  b.images = Tensor({indices.size(), shape[0], shape[1], shape[2]}, std::move(pixels));
  b.indices.assign(indices.begin(), indices.end());
  return b;
}

Tensor blob_template(std::size_t cls, std::size_t classes, std::array<std::size_t, 3> shape) {
  const auto [c, h, w] = shape;
  const std::size_t grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(classes))));
  const double cell_h = static_cast<double>(h) / static_cast<double>(grid);
  const double cell_w = static_cast<double>(w) / static_cast<double>(grid);
  const double cy = (static_cast<double>(cls / grid) + 0.5) * cell_h;
  const double cx = (static_cast<double>(cls % grid) + 0.5) * cell_w;
  const double sigma = 0.3 * std::min(cell_h, cell_w);
  std::vector<float> plane(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
      plane[y * w + x] = static_cast<float>(std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)));
    }
  std::vector<float> out;
  out.reserve(c * h * w);
  for (std::size_t k = 0; k < c; ++k) out.insert(out.end(), plane.begin(), plane.end());
  return Tensor({c, h, w}, std::move(out));
}

Dataset synth_blobs(std::size_t classes, std::size_t per_class, std::array<std::size_t, 3> shape, double noise_sigma,
                    std::uint64_t seed, Split split) {
  const auto [c, h, w] = shape;
  if (c == 0 || h < 4 || w < 4) throw ConfigError("synth_blobs: every extent must be >= 4 (channels >= 1)");
  if (classes == 0 || per_class == 0) throw ConfigError("synth_blobs: classes and per-class count must be positive");
  if (classes > h * w) {
    throw ConfigError("synth_blobs: " + std::to_string(classes) + " classes exceed the " + std::to_string(h * w) +
                      " templates a " + std::to_string(h) + "x" + std::to_string(w) + " grid provides");
  }
  if (!(noise_sigma >= 0.0)) throw ConfigError("synth_blobs: noise sigma must be >= 0");
  std::vector<Tensor> templates;
  for (std::size_t k = 0; k < classes; ++k) templates.push_back(blob_template(k, classes, shape));

  const std::size_t n = classes * per_class, stride = c * h * w;
  std::vector<float> pixels(n * stride);
  std::vector<Label> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % classes;
    labels[i] = static_cast<Label>(cls);
    Rng rng(derive_seed(seed, {i}));
    const auto t = templates[cls].values();
    for (std::size_t j = 0; j < stride; ++j) {
      const double v = static_cast<double>(t[j]) + (noise_sigma > 0.0 ? noise_sigma * rng.normal() : 0.0);
      pixels[i * stride + j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  Dataset ds{Tensor({n, c, h, w}, std::move(pixels)), std::move(labels), classes, split, "blobs-" + to_string(split)};
  ds.validate();
  return ds;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, Split split) {
  const auto img = read_bytes(images);
  const auto lab = read_bytes(labels);
  const std::uint32_t img_magic = read_be32(img, 0, images);
  if (img_magic != kIdxImages3 && img_magic != kIdxImages4) {
    throw FormatError(images.string() + ": offset 0: bad image magic " + hex(img_magic) + " (expected " +
                      hex(kIdxImages3) + " or " + hex(kIdxImages4) + ")");
  }
  const std::uint32_t lab_magic = read_be32(lab, 0, labels);
  if (lab_magic != kIdxLabels) {
    throw FormatError(labels.string() + ": offset 0: bad label magic " + hex(lab_magic) + " (expected " +
                      hex(kIdxLabels) + ")");
  }
  const std::size_t dims = img_magic & 0xff;
  std::vector<std::size_t> extent;
  for (std::size_t d = 0; d < dims; ++d) extent.push_back(read_be32(img, 4 + 4 * d, images));
  const std::size_t n = extent[0];
  const std::size_t c = dims == 4 ? extent[1] : 1;
  const std::size_t h = extent[dims - 2], w = extent[dims - 1];
  const std::size_t header = 4 + 4 * dims;
  const std::size_t need = header + n * c * h * w;
  if (img.size() != need) {
    throw FormatError(images.string() + ": offset " + std::to_string(std::min(img.size(), need)) + ": expected " +
                      std::to_string(need) + " bytes, file has " + std::to_string(img.size()));
  }
  const std::size_t count = read_be32(lab, 4, labels);
  if (count != n) {
    throw FormatError(labels.string() + ": offset 4: label count " + std::to_string(count) +
                      " disagrees with image count " + std::to_string(n));
  }
  if (lab.size() != 8 + n) {
    throw FormatError(labels.string() + ": offset " + std::to_string(std::min(lab.size(), 8 + n)) + ": expected " +
                      std::to_string(8 + n) + " bytes, file has " + std::to_string(lab.size()));
  }
  if (n == 0) throw FormatError(images.string() + ": offset 4: zero images");
  std::vector<float> pixels(n * c * h * w);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<float>(img[header + i]) / 255.0f;
  std::vector<Label> ys(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = static_cast<Label>(lab[8 + i]);
  Dataset ds{Tensor({n, c, h, w}, std::move(pixels)), ys, infer_classes(ys), split,
             images.stem().string()};
  ds.validate();
  return ds;
}

void save_idx(const Dataset& ds, const std::filesystem::path& images, const std::filesystem::path& labels) {
  ds.validate();
  const auto [c, h, w] = ds.sample_shape();
  std::vector<unsigned char> img;
  put_be32(img, c == 1 ? kIdxImages3 : kIdxImages4);
  put_be32(img, static_cast<std::uint32_t>(ds.size()));
  if (c != 1) put_be32(img, static_cast<std::uint32_t>(c));
  put_be32(img, static_cast<std::uint32_t>(h));
  put_be32(img, static_cast<std::uint32_t>(w));
  for (float v : ds.images.values())
    img.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  std::vector<unsigned char> lab;
  put_be32(lab, kIdxLabels);
  put_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (auto y : ds.labels) {
    if (y > 255) throw FormatError("IDX labels are single bytes; label " + std::to_string(y) + " does not fit");
    lab.push_back(static_cast<unsigned char>(y));
  }
  write_bytes(images, img);
  write_bytes(labels, lab);
}

Dataset load_csv(const std::filesystem::path& path, std::array<std::size_t, 3> shape, Split split) {
  std::ifstream in(path);
  if (!in) throw PathError("cannot open " + path.string());
  const std::size_t stride = shape[0] * shape[1] * shape[2];
  std::vector<float> pixels;
  std::vector<Label> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    char* end = nullptr;
    const long y = std::strtol(fields[0].c_str(), &end, 10);
    if (end == fields[0].c_str() || *end != '\0') {
      if (line_no == 1 && labels.empty()) continue;  // header
      throw FormatError(where + ": label '" + fields[0] + "' is not an integer");
    }
    if (fields.size() != stride + 1) {
      throw FormatError(where + ": expected " + std::to_string(stride + 1) + " fields, got " +
                        std::to_string(fields.size()));
    }
    if (y < 0) throw FormatError(where + ": negative label");
    labels.push_back(static_cast<Label>(y));
    for (std::size_t i = 1; i < fields.size(); ++i) {
      const float v = std::strtof(fields[i].c_str(), &end);
      if (end == fields[i].c_str() || *end != '\0' || !(v >= 0.0f && v <= 1.0f)) {
        throw FormatError(where + ": pixel " + std::to_string(i - 1) + " ('" + fields[i] + "') is not in [0, 1]");
      }
      pixels.push_back(v);
    }
  }
  if (labels.empty()) throw FormatError(path.string() + ": no samples");
  const std::size_t n = labels.size();
  Dataset ds{Tensor({n, shape[0], shape[1], shape[2]}, std::move(pixels)), labels, infer_classes(labels), split,
             path.stem().string()};
  ds.validate();
  return ds;
}

void save_csv(const Dataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PathError("cannot write " + path.string());
  const auto [c, h, w] = ds.sample_shape();
  const std::size_t stride = c * h * w;
  out << "label";
  for (std::size_t i = 0; i < stride; ++i) out << ",p" << i;
  out << '\n';
  char buf[32];
  const auto v = ds.images.values();
  for (std::size_t n = 0; n < ds.size(); ++n) {
    out << ds.labels[n];
    for (std::size_t i = 0; i < stride; ++i) {
      std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(v[n * stride + i]));
      out << buf;
    }
    out << '\n';
  }
}

void AugmentPolicy::validate(std::size_t height, std::size_t width) const {
  if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) throw ConfigError("augment.hflip_prob: must lie in [0, 1]");
  const std::size_t ch = crop_h ? crop_h : height, cw = crop_w ? crop_w : width;
  if (ch > height + 2 * pad || cw > width + 2 * pad) {
    throw ConfigError("augment: crop " + std::to_string(ch) + "x" + std::to_string(cw) + " exceeds padded input " +
                      std::to_string(height + 2 * pad) + "x" + std::to_string(width + 2 * pad));
  }
}

Tensor augment(const Tensor& batch, const AugmentPolicy& policy, std::uint64_t seed,
               std::span<const std::size_t> indices) {
  if (batch.rank() != 4) throw DimensionError("augment: batch must be B×C×H×W, got " + to_string(batch.shape()));
  const std::size_t b = batch.shape()[0], c = batch.shape()[1], h = batch.shape()[2], w = batch.shape()[3];
  if (indices.size() != b) throw DimensionError("augment: one sample index per batch row required");
  policy.validate(h, w);
  if (!policy.enabled) return batch.clone();
  const std::size_t oh = policy.crop_h ? policy.crop_h : h, ow = policy.crop_w ? policy.crop_w : w;
  const std::size_t ph = h + 2 * policy.pad, pw = w + 2 * policy.pad;
  std::vector<float> out(b * c * oh * ow, 0.0f);
  const auto src = batch.values();
  for (std::size_t n = 0; n < b; ++n) {
    Rng rng(derive_seed(seed, {indices[n]}));
    const std::size_t top = rng.uniform_int(ph - oh + 1), left = rng.uniform_int(pw - ow + 1);
    const bool flip = rng.uniform() < policy.hflip_prob;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          // Position in the padded image, then in the source.
          const std::size_t py = top + y, px = left + (flip ? ow - 1 - x : x);
          if (py < policy.pad || px < policy.pad || py >= policy.pad + h || px >= policy.pad + w) continue;
          out[((n * c + ch) * oh + y) * ow + x] = src[((n * c + ch) * h + (py - policy.pad)) * w + (px - policy.pad)];
        }
  }
  return Tensor({b, c, oh, ow}, std::move(out));
}

Dataset corrupt_labels(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("label noise fraction must lie in [0, 1]");
  if (fraction > 0.0 && ds.num_classes < 2) throw ConfigError("label noise needs at least 2 classes");
  Dataset out = ds;
  const std::size_t n = ds.size();
  const auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
  if (count == 0) return out;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, {0x6c6162656cULL}));
  rng.shuffle(order);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t i = order[k];
    const auto r = static_cast<Label>(rng.uniform_int(ds.num_classes - 1));
    out.labels[i] = r >= ds.labels[i] ? r + 1 : r;
  }
  return out;
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                              std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, {epoch}));
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  return out;
}

}  // namespace admkd
