#include "admkd/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>

#include "admkd/errors.hpp"

namespace admkd {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host byte order");

namespace {

std::uint64_t fnv1a(const std::vector<float>& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(data.data());
  for (std::size_t i = 0; i < data.size() * sizeof(float); ++i) h = (h ^ bytes[i]) * 0x100000001b3ULL;
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

class BlobWriter {
 public:
  void add(const std::string& name, const Shape& shape, std::span<const float> values) {
    entries_.push_back({{"name", name}, {"shape", shape}, {"offset", data_.size() * sizeof(float)}, {"count", values.size()}});
    data_.insert(data_.end(), values.begin(), values.end());
  }
  const std::vector<float>& data() const { return data_; }
  const Json& entries() const { return entries_; }

 private:
  std::vector<float> data_;
  Json entries_ = Json::array();
};

struct Blob {
  Json manifest;
  std::vector<float> data;
  std::map<std::string, std::pair<Shape, std::size_t>> tensors;  // name → (shape, first float)

  std::span<const float> get(const std::string& name, const Shape& expected) const {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError("checkpoint: missing tensor " + name);
    if (it->second.first != expected) throw CheckpointError("checkpoint: shape mismatch for " + name);
    std::size_t count = 1;
    for (auto e : expected) count *= e;
    return std::span<const float>(data).subspan(it->second.second, count);
  }
};

Json read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError(path.string() + ": cannot open manifest");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("format-version")) throw CheckpointError(path.string() + ": not a checkpoint manifest");
  if (j["format-version"] != kCheckpointVersion)
    throw CheckpointError(path.string() + ": format version " + j["format-version"].dump() + ", expected " +
                          std::to_string(kCheckpointVersion));
  return j;
}

Blob read_blob(const fs::path& manifest_path) {
  Blob b;
  b.manifest = read_manifest(manifest_path);
  try {
    const auto& info = b.manifest.at("blob");
    const auto file = manifest_path.parent_path() / info.at("file").get<std::string>();
    const auto bytes = info.at("bytes").get<std::uint64_t>();
    std::error_code ec;
    const auto actual = fs::file_size(file, ec);
    if (ec) throw CheckpointError(file.string() + ": cannot read blob");
    if (actual != bytes || bytes % sizeof(float) != 0)
      throw CheckpointError(file.string() + ": blob is " + std::to_string(actual) + " bytes, manifest says " +
                            std::to_string(bytes));
    b.data.resize(bytes / sizeof(float));
    std::ifstream in(file, std::ios::binary);
    in.read(reinterpret_cast<char*>(b.data.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw CheckpointError(file.string() + ": short read");
    if (hex(fnv1a(b.data)) != info.at("fnv1a").get<std::string>())
      throw CheckpointError(file.string() + ": checksum mismatch");
    for (const auto& t : b.manifest.at("tensors")) {
      const auto shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::uint64_t>(), count = t.at("count").get<std::uint64_t>();
      std::size_t n = 1;
      for (auto e : shape) n *= e;
      if (n != count || offset % sizeof(float) != 0 || offset + count * sizeof(float) > bytes)
        throw CheckpointError(manifest_path.string() + ": bad extent for " + t.at("name").get<std::string>());
      b.tensors[t.at("name").get<std::string>()] = {shape, offset / sizeof(float)};
    }
  } catch (const Json::exception& e) {
    throw CheckpointError(manifest_path.string() + ": malformed manifest (" + e.what() + ")");
  }
  return b;
}

void copy_into(Tensor& t, std::span<const float> values) {
  auto dst = t.mutable_values();
  std::copy(values.begin(), values.end(), dst.begin());
}

CheckpointInfo info_from(const Json& m, const fs::path& path) {
  CheckpointInfo info;
  info.manifest = path;
  try {
    info.name = m.at("name").get<std::string>();
    const auto role = parse_role(m.at("role").get<std::string>());
    if (!role) throw CheckpointError(path.string() + ": unknown role");
    info.role = *role;
    info.spec = spec_from_json(m.at("spec"), "spec");
    info.epoch = m.at("epoch").get<std::int64_t>();
    info.top1_train = m.at("metrics").at("top1-train").get<double>();
    info.top1_test = m.at("metrics").at("top1-test").get<double>();
  } catch (const Json::exception& e) {
    throw CheckpointError(path.string() + ": malformed manifest (" + e.what() + ")");
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  return info;
}

void restore_model(Model& model, const Blob& blob) {
  for (const auto& p : model.parameters()) {
    Tensor t = p.tensor;
    copy_into(t, blob.get("param/" + p.name, t.shape()));
  }
  for (const auto& b : model.buffers()) {
    Tensor t = b.tensor;
    copy_into(t, blob.get("buffer/" + b.name, t.shape()));
  }
}

}  // namespace

fs::path checkpoint_dir(const fs::path& root, std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch-%04zu", epoch);
  return root / buf;
}

void save_checkpoint(const RunState& state, const fs::path& dir, const std::vector<EpochRow>& rows) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw CheckpointError(dir.string() + ": " + ec.message());
  const auto& plan = state.plan;
  for (std::size_t i = 0; i < state.models.size(); ++i) {
    const auto& entry = plan.models[i];
    const auto& model = state.models[i];
    BlobWriter blob;
    for (const auto& p : model.parameters()) blob.add("param/" + p.name, p.tensor.shape(), p.tensor.values());
    for (const auto& b : model.buffers()) blob.add("buffer/" + b.name, b.tensor.shape(), b.tensor.values());
    const auto& params = model.parameters();
    for (std::size_t k = 0; k < params.size(); ++k)
      blob.add("velocity/" + params[k].name, params[k].tensor.shape(), state.optims[i].velocity[k]);
    for (const auto& pair : state.pairs) {
      if (pair.student != i) continue;
      const auto& teacher = plan.models[pair.teacher].name;
      for (std::size_t k = 0; k < pair.adapters.size(); ++k) {
        const auto& w = pair.adapters[k].weight;
        blob.add("adapter/" + teacher + "/" + std::to_string(k), w.shape(), w.values());
        blob.add("adapter-velocity/" + teacher + "/" + std::to_string(k), w.shape(), pair.optim.velocity[k]);
      }
    }
    Json manifest;
    manifest["format-version"] = kCheckpointVersion;
    manifest["name"] = entry.name;
    manifest["role"] = to_string(entry.role);
    manifest["spec"] = to_json(entry.spec);
    manifest["epoch"] = static_cast<std::int64_t>(state.next_epoch) - 1;
    const auto& cache = state.caches[i];
    if (!cache.empty()) {
      std::vector<std::size_t> indices;
      std::vector<float> values;
      for (const auto& [index, row] : cache.entries()) {
        indices.push_back(index);
        values.insert(values.end(), row.begin(), row.end());
      }
      blob.add("cache/rows", {indices.size(), cache.num_classes()}, values);
      manifest["cache"] = {{"classes", cache.num_classes()}, {"indices", indices}};
    }
    const auto& o = plan.optim;
    manifest["optimizer"] = {{"lr", state.optims[i].lr},
                             {"momentum", state.optims[i].momentum},
                             {"weight-decay", state.optims[i].weight_decay},
                             {"base-lr", o.schedule.base_lr},
                             {"milestones", o.schedule.milestones},
                             {"decay", o.schedule.decay}};
    manifest["rng"] = {{"seed", plan.seed}, {"next-epoch", state.next_epoch}, {"streams", "derived"}};
    double top1_train = 0.0, top1_test = 0.0;
    for (const auto& r : rows)
      if (r.model == entry.name) top1_train = r.top1_train, top1_test = r.top1_test;
    manifest["metrics"] = {{"top1-train", top1_train}, {"top1-test", top1_test}};
    const auto blob_name = entry.name + ".bin";
    manifest["blob"] = {{"file", blob_name},
                        {"bytes", blob.data().size() * sizeof(float)},
                        {"fnv1a", hex(fnv1a(blob.data()))}};
    manifest["tensors"] = blob.entries();

    {
      std::ofstream out(dir / blob_name, std::ios::binary | std::ios::trunc);
      out.write(reinterpret_cast<const char*>(blob.data().data()),
                static_cast<std::streamsize>(blob.data().size() * sizeof(float)));
      if (!out) throw CheckpointError((dir / blob_name).string() + ": write failed");
    }
    const auto tmp = dir / (entry.name + ".json.tmp");
    {
      std::ofstream out(tmp, std::ios::trunc);
      out << manifest.dump(2) << '\n';
      if (!out) throw CheckpointError(tmp.string() + ": write failed");
    }
    fs::rename(tmp, dir / (entry.name + ".json"), ec);
    if (ec) throw CheckpointError(tmp.string() + ": " + ec.message());
  }
}

void load_checkpoint(RunState& state, const fs::path& dir) {
  const auto& plan = state.plan;
  std::optional<std::size_t> next_epoch;
  for (std::size_t i = 0; i < state.models.size(); ++i) {
    const auto& entry = plan.models[i];
    const auto path = dir / (entry.name + ".json");
    if (!fs::exists(path)) throw CheckpointError(path.string() + ": missing manifest for model " + entry.name);
    const auto blob = read_blob(path);
    const auto info = info_from(blob.manifest, path);
    if (!(info.spec == entry.spec) || info.role != entry.role)
      throw CheckpointError(path.string() + ": model does not match the plan");
    try {
      if (blob.manifest.at("rng").at("seed").get<std::uint64_t>() != plan.seed)
        throw CheckpointError(path.string() + ": saved with a different seed");
      const auto n = blob.manifest.at("rng").at("next-epoch").get<std::size_t>();
      if (next_epoch && *next_epoch != n) throw CheckpointError(dir.string() + ": models saved at different epochs");
      next_epoch = n;
      state.optims[i].lr = blob.manifest.at("optimizer").at("lr").get<double>();
    } catch (const Json::exception& e) {
      throw CheckpointError(path.string() + ": malformed manifest (" + e.what() + ")");
    }
    restore_model(state.models[i], blob);
    const auto& params = state.models[i].parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto v = blob.get("velocity/" + params[k].name, params[k].tensor.shape());
      state.optims[i].velocity[k].assign(v.begin(), v.end());
    }
    for (auto& pair : state.pairs) {
      if (pair.student != i) continue;
      const auto& teacher = plan.models[pair.teacher].name;
      pair.optim.lr = state.optims[i].lr;
      for (std::size_t k = 0; k < pair.adapters.size(); ++k) {
        auto& w = pair.adapters[k].weight;
        copy_into(w, blob.get("adapter/" + teacher + "/" + std::to_string(k), w.shape()));
        const auto v = blob.get("adapter-velocity/" + teacher + "/" + std::to_string(k), w.shape());
        pair.optim.velocity[k].assign(v.begin(), v.end());
      }
    }
    std::map<std::size_t, std::vector<float>> cache;
    if (blob.manifest.contains("cache")) {
      const auto indices = blob.manifest["cache"].at("indices").get<std::vector<std::size_t>>();
      const auto classes = state.caches[i].num_classes();
      const auto rows = blob.get("cache/rows", {indices.size(), classes});
      for (std::size_t r = 0; r < indices.size(); ++r) {
        const auto row = rows.subspan(r * classes, classes);
        cache[indices[r]] = {row.begin(), row.end()};
      }
    }
    state.caches[i].restore(std::move(cache));
  }
  state.next_epoch = next_epoch.value_or(0);
}

CheckpointInfo read_checkpoint_info(const fs::path& manifest) { return info_from(read_manifest(manifest), manifest); }

Model load_model(const fs::path& manifest, CheckpointInfo* info) {
  const auto blob = read_blob(manifest);
  auto parsed = info_from(blob.manifest, manifest);
  try {
    parsed.spec.validate();
  } catch (const Error& e) {
    throw CheckpointError(manifest.string() + ": " + e.what());
  }
  Model model(parsed.spec, 0);
  restore_model(model, blob);
  if (info) *info = parsed;
  return model;
}

std::vector<Adapter> load_adapters(const fs::path& manifest, const std::string& teacher) {
  const auto blob = read_blob(manifest);
  std::vector<Adapter> out;
  for (std::size_t k = 0;; ++k) {
    const auto it = blob.tensors.find("adapter/" + teacher + "/" + std::to_string(k));
    if (it == blob.tensors.end()) break;
    const auto values = blob.get(it->first, it->second.first);
    out.push_back({Tensor(it->second.first, {values.begin(), values.end()})});
  }
  return out;
}

std::vector<CheckpointInfo> list_checkpoints(const fs::path& run_or_root) {
  std::vector<CheckpointInfo> out;
  std::error_code ec;
  fs::path root = run_or_root;
  if (fs::is_directory(root / "checkpoints", ec)) root /= "checkpoints";
  if (!fs::is_directory(root, ec)) return out;
  std::vector<fs::path> dirs{root};
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && e.path().filename().string().starts_with("epoch-")) dirs.push_back(e.path());
  for (const auto& d : dirs)
    for (const auto& e : fs::directory_iterator(d))
      if (e.is_regular_file() && e.path().extension() == ".json") out.push_back(read_checkpoint_info(e.path()));
  std::sort(out.begin(), out.end(), [](const CheckpointInfo& a, const CheckpointInfo& b) {
    return std::tie(a.epoch, a.name) < std::tie(b.epoch, b.name);
  });
  return out;
}

std::optional<fs::path> latest_checkpoint(const fs::path& root) {
  std::optional<fs::path> best;
  std::error_code ec;
  if (!fs::is_directory(root, ec)) return best;
  for (const auto& e : fs::directory_iterator(root)) {
    const auto name = e.path().filename().string();
    if (!e.is_directory() || !name.starts_with("epoch-")) continue;
    if (!best || name > best->filename().string()) best = e.path();
  }
  return best;
}

}  // namespace admkd
