#include "admkd/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "admkd/errors.hpp"

namespace admkd {

namespace fs = std::filesystem;

namespace {

/// Typed access to one JSON object that remembers which keys were read, so
/// anything left over can be reported as unknown.
class Section {
 public:
  Section(Json obj, std::string path) : obj_(std::move(obj)), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  const Json* get(const std::string& key) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  double number(const std::string& key, double fallback) {
    const Json* v = get(key);
    if (!v) return fallback;
    if (!v->is_number()) throw ConfigError(field(key) + ": expected a number");
    const double d = v->get<double>();
    if (!std::isfinite(d)) throw ConfigError(field(key) + ": must be finite");
    return d;
  }

  std::uint64_t count(const std::string& key, std::uint64_t fallback) {
    const Json* v = get(key);
    if (!v) return fallback;
    if (v->is_number_unsigned()) return v->get<std::uint64_t>();
    if (v->is_number_integer() && v->get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v->get<std::int64_t>());
    throw ConfigError(field(key) + ": expected a non-negative integer");
  }

  bool boolean(const std::string& key, bool fallback) {
    const Json* v = get(key);
    if (!v) return fallback;
    if (!v->is_boolean()) throw ConfigError(field(key) + ": expected true or false");
    return v->get<bool>();
  }

  std::string text(const std::string& key, const std::string& fallback) {
    const Json* v = get(key);
    if (!v) return fallback;
    if (!v->is_string()) throw ConfigError(field(key) + ": expected a string");
    return v->get<std::string>();
  }

  std::string required_text(const std::string& key) {
    if (!has(key)) throw ConfigError(field(key) + ": required");
    return text(key, "");
  }

  std::vector<std::size_t> counts(const std::string& key, std::vector<std::size_t> fallback) {
    const Json* v = get(key);
    if (!v) return fallback;
    if (!v->is_array()) throw ConfigError(field(key) + ": expected an array of non-negative integers");
    std::vector<std::size_t> out;
    for (const auto& e : *v) {
      if (!e.is_number_integer() || e.get<std::int64_t>() < 0)
        throw ConfigError(field(key) + ": expected an array of non-negative integers");
      out.push_back(e.get<std::size_t>());
    }
    return out;
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  void finish() const {
    for (const auto& [key, value] : obj_.items())
      if (!seen_.contains(key)) throw ConfigError(field(key) + ": unknown key");
  }

 private:
  Json obj_;
  std::string path_;
  std::set<std::string> seen_;
};

std::array<std::size_t, 3> shape3(Section& s, const std::string& key, std::array<std::size_t, 3> fallback) {
  const auto v = s.counts(key, {fallback.begin(), fallback.end()});
  if (v.size() != 3) throw ConfigError(s.field(key) + ": expected [channels, height, width]");
  return {v[0], v[1], v[2]};
}

std::string to_string(DataSource source) {
  switch (source) {
    case DataSource::Blobs: return "blobs";
    case DataSource::Idx: return "idx";
    case DataSource::Csv: return "csv";
  }
  return "blobs";
}

DataConfig parse_data(const Json& doc) {
  Section s(doc, "data");
  DataConfig d;
  const auto source = s.text("source", "blobs");
  if (source == "blobs") d.source = DataSource::Blobs;
  else if (source == "idx") d.source = DataSource::Idx;
  else if (source == "csv") d.source = DataSource::Csv;
  else throw ConfigError("data.source: expected blobs, idx or csv");

  d.classes = s.count("classes", d.classes);
  d.shape = shape3(s, "shape", d.shape);
  d.seed = s.count("seed", d.seed);
  d.label_noise = s.number("label-noise", d.label_noise);
  if (d.classes < 2) throw ConfigError("data.classes: at least two classes are required");
  if (d.label_noise < 0.0 || d.label_noise > 1.0) throw ConfigError("data.label-noise: must lie in [0, 1]");
  switch (d.source) {
    case DataSource::Blobs:
      d.train_per_class = s.count("train-per-class", d.train_per_class);
      d.test_per_class = s.count("test-per-class", d.test_per_class);
      d.noise = s.number("noise", d.noise);
      if (d.train_per_class == 0) throw ConfigError("data.train-per-class: must be positive");
      if (d.test_per_class == 0) throw ConfigError("data.test-per-class: must be positive");
      if (d.noise < 0.0) throw ConfigError("data.noise: must be non-negative");
      break;
    case DataSource::Idx:
      d.train_images = s.required_text("train-images");
      d.train_labels = s.required_text("train-labels");
      d.test_images = s.required_text("test-images");
      d.test_labels = s.required_text("test-labels");
      break;
    case DataSource::Csv:
      d.train_images = s.required_text("train");
      d.test_images = s.required_text("test");
      break;
  }
  if (const Json* a = s.get("augment")) {
    Section as(*a, "data.augment");
    d.augment.enabled = as.boolean("enabled", true);
    d.augment.pad = as.count("pad", d.augment.pad);
    const auto crop = as.counts("crop", {d.augment.crop_h, d.augment.crop_w});
    if (crop.size() != 2) throw ConfigError("data.augment.crop: expected [height, width]");
    d.augment.crop_h = crop[0];
    d.augment.crop_w = crop[1];
    d.augment.hflip_prob = as.number("hflip", d.augment.hflip_prob);
    as.finish();
    try {
      d.augment.validate(d.shape[1], d.shape[2]);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("data.augment: ") + e.what());
    }
  }
  s.finish();
  return d;
}

DistillConfig parse_distill(const Json* doc) {
  if (!doc) return {};
  Section s(*doc, "distill");
  DistillConfig d;
  const auto preset = s.text("preset", "");
  if (preset == "imagenet-like") d = DistillConfig::imagenet_like();
  else if (preset == "cifar-like") d = DistillConfig::cifar_like();
  else if (!preset.empty()) throw ConfigError("distill.preset: expected imagenet-like or cifar-like");
  d.tau = s.number("tau", d.tau);
  d.lambda = s.number("lambda", d.lambda);
  d.alpha = s.number("alpha", d.alpha);
  d.beta = s.number("beta", d.beta);
  d.gamma = s.number("gamma", d.gamma);
  d.eps = s.number("eps", d.eps);
  d.delta_start = s.number("delta-start", d.delta_start);
  d.delta_end = s.number("delta-end", d.delta_end);
  if (s.has("adm-form")) {
    const auto f = parse_adm_form(s.text("adm-form", ""));
    if (!f) throw ConfigError("distill.adm-form: expected ce-ce, kd-ce or kd-kd");
    d.adm_form = *f;
  }
  if (s.has("feat-variant")) {
    const auto v = parse_feat_variant(s.text("feat-variant", ""));
    if (!v) throw ConfigError("distill.feat-variant: expected plain, norm, relu or drop-third");
    d.feat_variant = *v;
  }
  s.finish();
  return d;
}

OptimConfig parse_optim(const Json* doc) {
  OptimConfig o;
  if (!doc) return o;
  Section s(*doc, "optim");
  o.schedule.base_lr = s.number("lr", o.schedule.base_lr);
  o.momentum = s.number("momentum", o.momentum);
  o.weight_decay = s.number("weight-decay", o.weight_decay);
  o.schedule.milestones = s.counts("milestones", o.schedule.milestones);
  o.schedule.decay = s.number("decay", o.schedule.decay);
  s.finish();
  return o;
}

}  // namespace

Json to_json(const ModelSpec& spec) {
  Json j;
  j["arch"] = spec.name;
  j["stage-widths"] = spec.stage_widths;
  j["blocks-per-stage"] = spec.blocks_per_stage;
  j["input-shape"] = spec.input_shape;
  j["classes"] = spec.num_classes;
  j["norm"] = spec.norm == Norm::BatchNorm ? "batch" : "none";
  j["classifier-bias"] = spec.classifier_bias;
  return j;
}

ModelSpec spec_from_json(const Json& doc, const std::string& path) {
  Section s(doc, path);
  ModelSpec spec;
  spec.name = s.required_text("arch");
  spec.stage_widths = s.counts("stage-widths", {});
  spec.blocks_per_stage = s.count("blocks-per-stage", 1);
  spec.input_shape = shape3(s, "input-shape", spec.input_shape);
  spec.num_classes = s.count("classes", spec.num_classes);
  const auto norm = s.text("norm", "batch");
  if (norm != "batch" && norm != "none") throw ConfigError(s.field("norm") + ": expected batch or none");
  spec.norm = norm == "batch" ? Norm::BatchNorm : Norm::None;
  spec.classifier_bias = s.boolean("classifier-bias", true);
  s.finish();
  return spec;
}

RunConfig parse_config(const Json& doc) {
  Section root(doc, "");
  RunConfig c;
  const Json* data = root.get("data");
  c.data = parse_data(data ? *data : Json::object());

  const Json* run = root.get("run");
  Section r(run ? *run : Json::object(), "run");
  const auto mode = parse_run_mode(r.text("mode", "online"));
  if (!mode) throw ConfigError("run.mode: expected online, offline, multi or independent");
  c.plan.mode = *mode;
  c.plan.epochs = r.count("epochs", 200);
  c.plan.batch_size = r.count("batch-size", 64);
  c.plan.seed = r.count("seed", 0);
  c.output_dir = r.text("output-dir", c.output_dir.string());
  c.checkpoint_every = r.count("checkpoint-every", 0);
  r.finish();

  c.plan.distill = parse_distill(root.get("distill"));
  c.plan.distill.mode = c.plan.mode;
  c.plan.optim = parse_optim(root.get("optim"));
  c.plan.augment = c.data.augment;

  const Json* models = root.get("models");
  if (!models || !models->is_array() || models->empty()) throw ConfigError("models: expected a non-empty array");
  for (std::size_t i = 0; i < models->size(); ++i) {
    const std::string path = "models[" + std::to_string(i) + "]";
    Section m((*models)[i], path);
    ModelEntry entry;
    const auto role = parse_role(m.text("role", "student"));
    if (!role) throw ConfigError(path + ".role: expected teacher or student");
    entry.role = *role;
    entry.name = m.text("name", to_string(*role));
    const auto arch = m.required_text("arch");
    if (arch == "tiny-a") entry.spec = tiny_a(c.data.shape, c.data.classes);
    else if (arch == "tiny-b") entry.spec = tiny_b(c.data.shape, c.data.classes);
    else entry.spec.name = arch;
    entry.spec.input_shape = c.data.shape;
    entry.spec.num_classes = c.data.classes;
    entry.spec.stage_widths = m.counts("stage-widths", entry.spec.stage_widths);
    entry.spec.blocks_per_stage = m.count("blocks-per-stage", entry.spec.blocks_per_stage);
    const auto norm = m.text("norm", entry.spec.norm == Norm::BatchNorm ? "batch" : "none");
    if (norm != "batch" && norm != "none") throw ConfigError(path + ".norm: expected batch or none");
    entry.spec.norm = norm == "batch" ? Norm::BatchNorm : Norm::None;
    entry.spec.classifier_bias = m.boolean("classifier-bias", entry.spec.classifier_bias);
    if (entry.spec.stage_widths.empty()) throw ConfigError(path + ".stage-widths: required for arch " + arch);
    c.init.emplace_back(m.text("init", ""));
    m.finish();
    c.plan.models.push_back(std::move(entry));
  }
  root.finish();

  try {
    c.plan.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("models: ") + e.what());
  }
  for (std::size_t i = 0; i < c.plan.models.size(); ++i)
    if (c.plan.is_frozen(i) && c.init[i].empty())
      throw ConfigError("models[" + std::to_string(i) + "].init: a frozen offline teacher needs a checkpoint");
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config");
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  auto c = parse_config(doc);
  const auto base = path.parent_path();
  auto resolve = [&](fs::path& p) {
    if (!p.empty() && p.is_relative()) p = base / p;
  };
  resolve(c.data.train_images);
  resolve(c.data.train_labels);
  resolve(c.data.test_images);
  resolve(c.data.test_labels);
  for (auto& p : c.init) resolve(p);
  return c;
}

Json to_json(const RunConfig& c) {
  Json j;
  Json models = Json::array();
  for (std::size_t i = 0; i < c.plan.models.size(); ++i) {
    const auto& m = c.plan.models[i];
    Json e;
    e["name"] = m.name;
    e["role"] = to_string(m.role);
    e["arch"] = m.spec.name;
    e["stage-widths"] = m.spec.stage_widths;
    e["blocks-per-stage"] = m.spec.blocks_per_stage;
    e["norm"] = m.spec.norm == Norm::BatchNorm ? "batch" : "none";
    e["classifier-bias"] = m.spec.classifier_bias;
    if (i < c.init.size() && !c.init[i].empty()) e["init"] = c.init[i].string();
    models.push_back(e);
  }
  j["models"] = models;

  const auto& d = c.data;
  Json data;
  data["source"] = to_string(d.source);
  data["classes"] = d.classes;
  data["shape"] = d.shape;
  data["seed"] = d.seed;
  data["label-noise"] = d.label_noise;
  switch (d.source) {
    case DataSource::Blobs:
      data["train-per-class"] = d.train_per_class;
      data["test-per-class"] = d.test_per_class;
      data["noise"] = d.noise;
      break;
    case DataSource::Idx:
      data["train-images"] = d.train_images.string();
      data["train-labels"] = d.train_labels.string();
      data["test-images"] = d.test_images.string();
      data["test-labels"] = d.test_labels.string();
      break;
    case DataSource::Csv:
      data["train"] = d.train_images.string();
      data["test"] = d.test_images.string();
      break;
  }
  data["augment"] = {{"enabled", d.augment.enabled},
                     {"pad", d.augment.pad},
                     {"crop", {d.augment.crop_h, d.augment.crop_w}},
                     {"hflip", d.augment.hflip_prob}};
  j["data"] = data;

  const auto& k = c.plan.distill;
  j["distill"] = {{"tau", k.tau},
                  {"lambda", k.lambda},
                  {"alpha", k.alpha},
                  {"beta", k.beta},
                  {"gamma", k.gamma},
                  {"eps", k.eps},
                  {"adm-form", to_string(k.adm_form)},
                  {"feat-variant", to_string(k.feat_variant)},
                  {"delta-start", k.delta_start},
                  {"delta-end", k.delta_end}};
  const auto& o = c.plan.optim;
  j["optim"] = {{"lr", o.schedule.base_lr},
                {"momentum", o.momentum},
                {"weight-decay", o.weight_decay},
                {"milestones", o.schedule.milestones},
                {"decay", o.schedule.decay}};
  j["run"] = {{"mode", to_string(c.plan.mode)},
              {"epochs", c.plan.epochs},
              {"batch-size", c.plan.batch_size},
              {"seed", c.plan.seed},
              {"output-dir", c.output_dir.string()},
              {"checkpoint-every", c.checkpoint_every}};
  return j;
}

std::pair<Dataset, Dataset> load_datasets(const DataConfig& d) {
  Dataset train, test;
  switch (d.source) {
    case DataSource::Blobs:
      train = synth_blobs(d.classes, d.train_per_class, d.shape, d.noise, d.seed, Split::Train);
      test = synth_blobs(d.classes, d.test_per_class, d.shape, d.noise, derive_seed(d.seed, {0x74657374}), Split::Test);
      break;
    case DataSource::Idx:
      train = load_idx(d.train_images, d.train_labels, Split::Train);
      test = load_idx(d.test_images, d.test_labels, Split::Test);
      break;
    case DataSource::Csv:
      train = load_csv(d.train_images, d.shape, Split::Train);
      test = load_csv(d.test_images, d.shape, Split::Test);
      break;
  }
  for (Dataset* ds : {&train, &test}) {
    if (ds->sample_shape() != d.shape)
      throw DataError(ds->name + ": sample shape does not match data.shape");
    if (ds->num_classes > d.classes) throw DataError(ds->name + ": labels exceed data.classes");
    ds->num_classes = d.classes;
  }
  if (d.label_noise > 0.0) train = corrupt_labels(train, d.label_noise, derive_seed(d.seed, {0x6e6f697365}));
  return {std::move(train), std::move(test)};
}

}  // namespace admkd
