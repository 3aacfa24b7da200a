#include "admkd/commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>

#include "admkd/checkpoint.hpp"
#include "admkd/config.hpp"
#include "admkd/errors.hpp"

namespace admkd {

namespace fs = std::filesystem;

namespace {

/// Maps library errors onto the exit-code taxonomy.
int guarded(const char* command, std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const NumericError& e) {
    err << command << ": numeric abort in " << e.component() << ": " << e.what() << '\n';
    return kExitNumeric;
  } catch (const CheckpointError& e) {
    err << command << ": checkpoint error: " << e.what() << '\n';
    return kExitCheckpoint;
  } catch (const AnalysisError& e) {
    err << command << ": analysis error: " << e.what() << '\n';
    return kExitAnalysis;
  } catch (const ConfigError& e) {
    err << command << ": config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const Error& e) {
    err << command << ": " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << command << ": unexpected failure: " << e.what() << '\n';
    return kExitCheckFailure;
  }
}

/// Holds `<dir>/.lock` for the lifetime of the object.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f)
      throw PathError(dir.string() + ": locked by another run (remove " + path_.string() + " if that run is gone)");
    std::fclose(f);
  }
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string csv_row(const EpochRow& r) {
  std::string s = std::to_string(r.epoch) + "," + r.model;
  for (double v : {r.ce, r.kd, r.feat, r.co, r.di, r.total, r.top1_train, r.top1_test, r.sim_min, r.sim_max, r.sim_var,
                   r.lr})
    s += "," + fmt(v);
  return s;
}

std::string csv_header() {
  std::string s;
  for (const auto& c : metrics_columns()) s += (s.empty() ? "" : ",") + c;
  return s;
}

/// Keeps the header and rows of epochs before `next_epoch`.
std::string surviving_rows(const fs::path& path, std::size_t next_epoch) {
  std::ifstream in(path);
  std::string line, kept;
  if (!in || !std::getline(in, line) || line != csv_header()) return csv_header() + "\n";
  kept = line + "\n";
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    if (std::stoull(line.substr(0, comma)) < next_epoch) kept += line + "\n";
  }
  return kept;
}

Dataset load_eval_data(const fs::path& path, const DataOptions& options, const std::array<std::size_t, 3>& shape) {
  const auto ext = path.extension().string();
  if (ext == ".json") {
    const auto config = load_config(path);
    auto [train, test] = load_datasets(config.data);
    if (options.split == "train") return train;
    if (options.split == "test") return test;
    throw ConfigError("--split: expected train or test");
  }
  if (ext == ".csv") return load_csv(path, shape);
  if (!options.labels) throw ConfigError(path.string() + ": IDX images need --labels");
  return load_idx(path, *options.labels);
}

Tensor sample_of(const Tensor& batch, std::size_t n) {
  const std::size_t c = batch.shape()[1], h = batch.shape()[2], w = batch.shape()[3];
  const auto v = batch.values().subspan(n * c * h * w, c * h * w);
  return Tensor({c, h, w}, {v.begin(), v.end()});
}

/// Last-stage features and head of one checkpoint over the whole split.
struct Probe {
  CheckpointInfo info;
  Tensor features;  // N × C × H × W
  LinearHead head;
};

Probe probe(const fs::path& manifest, const Dataset& data) {
  Probe p;
  auto model = load_model(manifest, &p.info);
  if (data.sample_shape() != p.info.spec.input_shape)
    throw AnalysisError(manifest.string() + ": model input does not match the data");
  NoGradGuard guard;
  std::vector<Tensor> chunks;
  for (std::size_t start = 0; start < data.size(); start += 256) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + 256); ++i) idx.push_back(i);
    chunks.push_back(model.forward(gather(data, idx).images, false).features.back());
  }
  p.features = chunks.size() == 1 ? chunks.front() : concat<float>(chunks, 0);
  p.head = model.head();
  return p;
}

RegionMask cam_mask(const Probe& p, std::size_t n, Label label, double t) {
  const std::size_t c = p.features.shape()[1];
  const auto row = p.head.weight.values().subspan(static_cast<std::size_t>(label) * c, c);
  return threshold_mask(cam(sample_of(p.features, n), row), ThresholdRule::frac_of_max(t), MaskSource::Cam);
}

}  // namespace

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> columns{"epoch", "model", "ce", "kd", "feat", "co", "di", "total",
                                                "top1-train", "top1-test", "sim-min", "sim-max", "sim-var", "lr"};
  return columns;
}

int cmd_train(const fs::path& config_path, const TrainOptions& options, std::ostream& out, std::ostream& err) {
  return guarded("train", err, [&] {
    auto config = load_config(config_path);
    if (const char* env = std::getenv(kOutputDirEnv); env && *env) config.output_dir = env;
    const auto dir = config.output_dir;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw PathError(dir.string() + ": " + ec.message());
    DirectoryLock lock(dir);

    const auto [train, test] = load_datasets(config.data);
    auto state = RunState::create(config.plan);
    for (std::size_t i = 0; i < config.init.size(); ++i) {
      if (config.init[i].empty()) continue;
      CheckpointInfo info;
      const auto source = load_model(config.init[i], &info);
      if (!(info.spec == config.plan.models[i].spec))
        throw CheckpointError(config.init[i].string() + ": architecture differs from models[" + std::to_string(i) + "]");
      auto& target = state.models[i];
      for (std::size_t k = 0; k < target.parameters().size(); ++k) {
        Tensor t = target.parameters()[k].tensor;
        const auto v = source.parameters()[k].tensor.values();
        std::copy(v.begin(), v.end(), t.mutable_values().begin());
      }
      for (std::size_t k = 0; k < target.buffers().size(); ++k) {
        Tensor t = target.buffers()[k].tensor;
        const auto v = source.buffers()[k].tensor.values();
        std::copy(v.begin(), v.end(), t.mutable_values().begin());
      }
    }

    const auto ckpt_root = dir / "checkpoints";
    if (options.resume) {
      if (const auto latest = latest_checkpoint(ckpt_root)) {
        load_checkpoint(state, *latest);
        out << "resuming at epoch " << state.next_epoch << " from " << latest->string() << '\n';
      }
    }
    {
      std::ofstream cfg(dir / "config.json", std::ios::trunc);
      cfg << to_json(config).dump(2) << '\n';
    }
    const auto metrics_path = dir / "metrics.csv";
    const std::string kept = options.resume ? surviving_rows(metrics_path, state.next_epoch) : csv_header() + "\n";
    std::ofstream metrics(metrics_path, std::ios::trunc);
    metrics << kept;
    if (!metrics) throw PathError(metrics_path.string() + ": cannot write");

    std::vector<EpochRow> rows;
    std::map<std::string, std::pair<double, std::size_t>> best_teacher;
    auto write_summary = [&](const std::string& status, const std::string& detail) {
      Json s;
      s["status"] = status;
      if (!detail.empty()) s["detail"] = detail;
      s["epochs-completed"] = state.next_epoch;
      Json final = Json::object();
      for (const auto& r : rows)
        final[r.model] = {{"epoch", r.epoch}, {"top1-train", r.top1_train}, {"top1-test", r.top1_test}, {"ce", r.ce}};
      s["final"] = final;
      std::ofstream f(dir / "summary.json", std::ios::trunc);
      f << s.dump(2) << '\n';
    };
    try {
      const auto& plan = state.plan;
      while (state.next_epoch < plan.epochs) {
        const std::size_t epoch = state.next_epoch;
        rows = run_epoch(state, train, test);
        for (const auto& r : rows) metrics << csv_row(r) << '\n';
        metrics.flush();
        out << "epoch " << epoch;
        for (const auto& r : rows) out << "  " << r.model << " train " << fmt(r.top1_train) << " test " << fmt(r.top1_test);
        out << '\n';
        const bool last = epoch + 1 == plan.epochs;
        if (last || (config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0))
          save_checkpoint(state, checkpoint_dir(ckpt_root, epoch), rows);
      }
    } catch (const NumericError& e) {
      write_summary("numeric-abort", e.component());
      throw;
    }
    write_summary("completed", "");
    return int(kExitOk);
  });
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data, const DataOptions& options, std::ostream& out,
             std::ostream& err) {
  return guarded("eval", err, [&] {
    CheckpointInfo info;
    auto model = load_model(checkpoint, &info);
    const auto ds = load_eval_data(data, options, info.spec.input_shape);
    if (ds.sample_shape() != info.spec.input_shape) throw DataError("eval: data does not match the model input");
    const auto r = evaluate(model, ds);
    Json j;
    j["model"] = info.name;
    j["epoch"] = info.epoch;
    j["samples"] = ds.size();
    j["top1"] = r.top1;
    j["mean-ce"] = r.mean_loss;
    out << j.dump() << '\n';
    return int(kExitOk);
  });
}

int cmd_analyze(const fs::path& checkpoints, const fs::path& data, const fs::path& out_dir,
                const AnalyzeOptions& options, std::ostream& out, std::ostream& err) {
  return guarded("analyze", err, [&] {
    const auto list = list_checkpoints(checkpoints);
    if (list.empty()) throw AnalysisError(checkpoints.string() + ": no checkpoints found");

    fs::path reference_path;
    if (options.reference) {
      reference_path = *options.reference;
      if (!fs::exists(reference_path)) throw AnalysisError(reference_path.string() + ": reference checkpoint missing");
    } else {
      const CheckpointInfo* best = nullptr;
      for (const auto& c : list)
        if (c.role == Role::Teacher && (!best || c.top1_test >= best->top1_test)) best = &c;
      if (!best) throw AnalysisError(checkpoints.string() + ": no teacher checkpoint to serve as the reference");
      reference_path = best->manifest;
    }
    const auto reference_info = read_checkpoint_info(reference_path);
    const auto ds = load_eval_data(data, options.data, reference_info.spec.input_shape);
    const auto reference = probe(reference_path, ds);
    const double t = options.cam_threshold;

    std::vector<RegionMask> tor;
    for (std::size_t n = 0; n < ds.size(); ++n) {
      auto m = cam_mask(reference, n, ds.labels[n], t);
      m.source = MaskSource::Reference;
      tor.push_back(std::move(m));
    }

    fs::create_directories(out_dir / "masks");
    std::vector<CurvePoint> curves;
    std::map<std::int64_t, std::map<std::string, const CheckpointInfo*>> by_epoch;
    for (const auto& c : list) by_epoch[c.epoch][c.name] = &c;

    auto epoch_of = [](std::int64_t e) { return static_cast<std::size_t>(std::max<std::int64_t>(e, 0)); };
    const std::int64_t last_epoch = by_epoch.rbegin()->first;
    std::map<std::string, std::vector<SimilarityStatRow>> tables;
    std::size_t partition_violations = 0;
    const std::size_t dumps = std::min(options.dump_samples, ds.size());
    for (std::size_t n = 0; n < dumps; ++n) write_pgm(tor[n], out_dir / "masks" / ("tor-" + std::to_string(n) + ".pgm"));

    double self_miou = 0.0;
    for (const auto& [epoch, models] : by_epoch) {
      std::map<std::string, Probe> probes;
      for (const auto& [name, info] : models) {
        auto p = probe(info->manifest, ds);
        double total = 0.0;
        for (std::size_t n = 0; n < ds.size(); ++n) {
          const auto mask = cam_mask(p, n, ds.labels[n], t);
          total += miou(mask, tor[n]);
          if (epoch == last_epoch && n < dumps)
            write_pgm(mask, out_dir / "masks" / ("cam-" + name + "-" + std::to_string(n) + ".pgm"));
        }
        const double value = total / static_cast<double>(ds.size());
        curves.push_back({epoch_of(epoch), "cam-miou/" + name, value});
        if (fs::equivalent(info->manifest, reference_path)) self_miou = value;
        probes.emplace(name, std::move(p));
      }
      for (const auto& [sname, sinfo] : models) {
        if (sinfo->role != Role::Student) continue;
        for (const auto& [tname, tinfo] : models) {
          if (tinfo->role != Role::Teacher) continue;
          const auto adapters = load_adapters(sinfo->manifest, tname);
          if (adapters.empty()) continue;
          const auto& fs_last = probes.at(sname).features;
          const auto& ft_last = probes.at(tname).features;
          SimilarityMap sim;
          {
            NoGradGuard guard;
            sim = similarity_map(adapt(adapters.back(), fs_last), ft_last);
          }
          const std::size_t h = ft_last.shape()[2], w = ft_last.shape()[3];
          if (h != tor.front().height || w != tor.front().width)
            throw AnalysisError("analyze: similarity maps and reference masks differ in resolution");
          double similar = 0.0, discrepancy = 0.0;
          for (std::size_t n = 0; n < ds.size(); ++n) {
            const auto v = sim.values.values().subspan(n * h * w, h * w);
            const auto [sm, dm] = similarity_regions(Tensor({h, w}, {v.begin(), v.end()}));
            for (std::size_t k = 0; k < sm.values.size(); ++k) partition_violations += sm.values[k] == dm.values[k];
            similar += miou(sm, tor[n]);
            discrepancy += miou(dm, tor[n]);
            if (epoch == last_epoch && n < dumps) {
              const auto tag = tname + "-" + sname + "-" + std::to_string(n) + ".pgm";
              write_pgm(sm, out_dir / "masks" / ("similar-" + tag));
              write_pgm(dm, out_dir / "masks" / ("discrepancy-" + tag));
            }
          }
          const auto pair = tname + "-" + sname;
          curves.push_back({epoch_of(epoch), "similar-miou/" + pair, similar / static_cast<double>(ds.size())});
          curves.push_back({epoch_of(epoch), "discrepancy-miou/" + pair, discrepancy / static_cast<double>(ds.size())});
          const auto stats = similarity_stats(divergence_weights(sim, DistillConfig{}.eps));
          tables[pair].push_back({epoch_of(epoch), stats.min, stats.max, stats.variance});
        }
      }
    }
    if (partition_violations) throw AnalysisError("analyze: similarity masks failed to partition the grid");
    curves.push_back({epoch_of(reference_info.epoch), "reference-self-miou", self_miou});
    emit_curves(curves, out_dir / "curves.csv");
    for (const auto& [pair, rows] : tables) write_similarity_table(rows, out_dir / ("similarity-stats-" + pair + ".csv"));

    Json summary;
    summary["reference"] = {{"manifest", reference_path.string()},
                            {"model", reference_info.name},
                            {"epoch", reference_info.epoch},
                            {"top1-test", reference_info.top1_test}};
    summary["checkpoints"] = list.size();
    summary["samples"] = ds.size();
    summary["cam-threshold"] = t;
    summary["self-miou"] = self_miou;
    std::ofstream(out_dir / "analysis.json") << summary.dump(2) << '\n';
    out << "analyzed " << list.size() << " checkpoints against " << reference_info.name << " (epoch "
        << reference_info.epoch << "), self mIoU " << self_miou << '\n';
    return int(kExitOk);
  });
}

int cmd_gradcheck(std::ostream& out, std::ostream& err, const std::vector<GradCheckCase>& cases) {
  return guarded("gradcheck", err, [&] { return run_gradcheck_suite(cases, out); });
}

}  // namespace admkd
