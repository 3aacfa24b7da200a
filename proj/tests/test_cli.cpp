#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "admkd/checkpoint.hpp"
#include "admkd/commands.hpp"
#include "admkd/config.hpp"

using namespace admkd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "admkd-test-cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Json config_with(const fs::path& out, const Json& patch = Json::object()) {
  Json j = Json::parse(R"({
    "models": [
      {"name": "student", "role": "student", "arch": "custom", "stage-widths": [4, 8]},
      {"name": "teacher", "role": "teacher", "arch": "custom", "stage-widths": [6, 12]}
    ],
    "data": {"source": "blobs", "classes": 4, "train-per-class": 12, "test-per-class": 4, "shape": [1, 8, 8]},
    "distill": {"preset": "imagenet-like"},
    "optim": {"lr": 0.05, "milestones": [3]},
    "run": {"mode": "online", "epochs": 4, "batch-size": 16, "seed": 3, "checkpoint-every": 2}
  })");
  j["run"]["output-dir"] = out.string();
  j.merge_patch(patch);
  return j;
}

fs::path write_config(const fs::path& dir, const Json& j, const std::string& name = "config.json") {
  const auto p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string config_error(const Json& j) {
  try {
    parse_config(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

std::vector<std::uint64_t> checksums(const RunState& s) {
  std::vector<std::uint64_t> out;
  for (const auto& m : s.models) out.push_back(m.checksum());
  return out;
}

int train(const fs::path& config, bool resume = false) {
  std::ostringstream out, err;
  return cmd_train(config, TrainOptions{resume}, out, err);
}

}  // namespace

TEST_CASE("config defaults and round trip") {
  const auto dir = scratch("roundtrip");
  const auto c = parse_config(config_with(dir / "run"));
  CHECK(c.plan.distill == [] {
    auto d = DistillConfig::imagenet_like();
    return d;
  }());
  CHECK(c.plan.optim.momentum == 0.9);
  CHECK(c.plan.models[1].role == Role::Teacher);
  CHECK(c.plan.models[0].spec.input_shape == std::array<std::size_t, 3>{1, 8, 8});
  CHECK(c.checkpoint_every == 2);
  const auto again = parse_config(to_json(c));
  CHECK(again == c);
  CHECK(to_json(again) == to_json(c));

  const auto minimal = parse_config(Json::parse(R"({"models": [{"arch": "tiny-b"}, {"arch": "tiny-a", "role": "teacher"}]})"));
  CHECK(minimal.plan.distill.tau == 1.0);
  CHECK(minimal.plan.distill.lambda == 1.0);
  CHECK(minimal.plan.distill.alpha == 0.2);
  CHECK(minimal.plan.distill.beta == 0.6);
  CHECK(minimal.plan.distill.gamma == 0.01);
  CHECK(minimal.plan.models[1].spec.stage_widths == std::vector<std::size_t>{32, 64, 128});
  CHECK(minimal.plan.models[0].name == "student");
  CHECK(parse_config(to_json(minimal)) == minimal);

  const auto cifar = parse_config(config_with(dir, {{"distill", {{"preset", "cifar-like"}, {"beta", 0.5}}}}));
  CHECK(cifar.plan.distill.alpha == 0.01);
  CHECK(cifar.plan.distill.beta == 0.5);
  CHECK(cifar.plan.distill.gamma == 1.0);
}

TEST_CASE("config errors name the field") {
  const auto dir = scratch("errors");
  CHECK(config_error(config_with(dir, {{"distill", {{"tau", -1}}}})).starts_with("distill.tau"));
  CHECK(config_error(config_with(dir, {{"distill", {{"tua", 1}}}})) == "distill.tua: unknown key");
  CHECK(config_error(config_with(dir, {{"extra", 1}})) == "extra: unknown key");
  CHECK(config_error(config_with(dir, {{"run", {{"epochs", "ten"}}}})).starts_with("run.epochs"));
  CHECK(config_error(config_with(dir, {{"run", {{"mode", "hybrid"}}}})).starts_with("run.mode"));
  CHECK(config_error(config_with(dir, {{"data", {{"source", "idx"}}}})).starts_with("data.train-images"));
  CHECK(config_error(config_with(dir, {{"data", {{"noise", 0.1}, {"train", "x.csv"}}}})) == "data.train: unknown key");
  CHECK(config_error(config_with(dir, {{"optim", {{"milestones", {5, 3}}}}})).starts_with("optim.milestones"));
  CHECK(config_error(config_with(dir, {{"run", {{"mode", "offline"}}}})).starts_with("models[1].init"));
  auto bad_role = config_with(dir);
  bad_role["models"][0]["role"] = "mentor";
  CHECK(config_error(bad_role).starts_with("models[0].role"));
  auto three = config_with(dir);
  three["models"].push_back(three["models"][0]);
  three["models"][2]["name"] = "other";
  CHECK(config_error(three).starts_with("models:"));
}

TEST_CASE("checkpoint round trip restores the full run state") {
  const auto dir = scratch("ckpt");
  auto config = parse_config(config_with(dir, {{"distill", {{"adm-form", "kd-kd"}}}}));
  const auto [train_ds, test_ds] = load_datasets(config.data);
  auto state = RunState::create(config.plan);
  const auto rows = run_epoch(state, train_ds, test_ds);
  save_checkpoint(state, dir / "epoch-0000", rows);

  auto loaded = RunState::create(config.plan);
  load_checkpoint(loaded, dir / "epoch-0000");
  CHECK(checksums(loaded) == checksums(state));
  CHECK(loaded.next_epoch == 1);
  for (std::size_t i = 0; i < 2; ++i) CHECK(loaded.optims[i].velocity == state.optims[i].velocity);
  CHECK(loaded.pairs[0].optim.velocity == state.pairs[0].optim.velocity);
  for (std::size_t k = 0; k < state.pairs[0].adapters.size(); ++k) {
    const auto a = loaded.pairs[0].adapters[k].weight.values(), b = state.pairs[0].adapters[k].weight.values();
    CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  }
  CHECK(loaded.caches[1].entries() == state.caches[1].entries());
  CHECK(loaded.caches[1].size() == train_ds.size());

  CheckpointInfo info;
  const auto model = load_model(dir / "epoch-0000" / "teacher.json", &info);
  CHECK(model.checksum() == state.models[1].checksum());
  CHECK(info.epoch == 0);
  CHECK(info.role == Role::Teacher);
  CHECK(info.top1_test == rows[1].top1_test);
  CHECK(load_adapters(dir / "epoch-0000" / "student.json", "teacher").size() == 2);
  CHECK(load_adapters(dir / "epoch-0000" / "teacher.json", "student").empty());

  // Mismatched plans are refused.
  auto other = config.plan;
  other.seed = 99;
  auto wrong = RunState::create(other);
  CHECK_THROWS_AS(load_checkpoint(wrong, dir / "epoch-0000"), CheckpointError);
}

TEST_CASE("resumed training matches an unbroken run") {
  const auto dir = scratch("resume");
  auto config = parse_config(config_with(dir, {{"distill", {{"adm-form", "kd-kd"}}},
                                                {"data", {{"augment", {{"pad", 1}, {"hflip", 0.5}}}}}}));
  const auto [train_ds, test_ds] = load_datasets(config.data);
  auto unbroken = RunState::create(config.plan);
  std::vector<std::vector<EpochRow>> expected;
  for (int e = 0; e < 4; ++e) expected.push_back(run_epoch(unbroken, train_ds, test_ds));

  auto first = RunState::create(config.plan);
  std::vector<EpochRow> rows;
  for (int e = 0; e < 2; ++e) rows = run_epoch(first, train_ds, test_ds);
  save_checkpoint(first, dir / "mid", rows);
  auto resumed = RunState::create(config.plan);
  load_checkpoint(resumed, dir / "mid");
  for (int e = 2; e < 4; ++e) {
    const auto got = run_epoch(resumed, train_ds, test_ds);
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].total == expected[e][i].total);
      CHECK(got[i].di == expected[e][i].di);
      CHECK(got[i].top1_test == expected[e][i].top1_test);
    }
  }
  CHECK(checksums(resumed) == checksums(unbroken));
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto dir = scratch("corrupt");
  auto config = parse_config(config_with(dir));
  auto state = RunState::create(config.plan);
  save_checkpoint(state, dir, {});
  const auto manifest = dir / "student.json";
  std::ostringstream out, err;
  CHECK(cmd_eval(manifest, write_config(dir, config_with(dir / "run")), {}, out, err) == kExitOk);

  fs::resize_file(dir / "student.bin", fs::file_size(dir / "student.bin") - 4);
  CHECK_THROWS_AS(load_model(manifest), CheckpointError);
  CHECK(cmd_eval(manifest, dir / "config.json", {}, out, err) == kExitCheckpoint);

  save_checkpoint(state, dir, {});
  auto j = Json::parse(slurp(manifest));
  j["format-version"] = 99;
  std::ofstream(manifest) << j.dump();
  CHECK(cmd_eval(manifest, dir / "config.json", {}, out, err) == kExitCheckpoint);
  CHECK(err.str().find("format version") != std::string::npos);

  save_checkpoint(state, dir, {});
  {
    std::fstream f(dir / "teacher.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(10);
    f.put('\x7f');
  }
  CHECK_THROWS_WITH_AS(load_model(dir / "teacher.json"), doctest::Contains("checksum"), CheckpointError);
}

TEST_CASE("train writes metrics, checkpoints and a summary") {
  const auto dir = scratch("train");
  const auto cfg = write_config(dir, config_with(dir / "a"));
  std::ostringstream out, err;
  REQUIRE(cmd_train(cfg, {}, out, err) == kExitOk);
  const auto csv = slurp(dir / "a" / "metrics.csv");
  CHECK(csv.starts_with(
      "epoch,model,ce,kd,feat,co,di,total,top1-train,top1-test,sim-min,sim-max,sim-var,lr\n"));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 4 * 2);
  CHECK(read_curves(dir / "a" / "metrics.csv").size() == 4 * 2 * 12);
  CHECK(fs::exists(dir / "a" / "checkpoints" / "epoch-0001" / "student.json"));
  CHECK(fs::exists(dir / "a" / "checkpoints" / "epoch-0003" / "teacher.bin"));
  CHECK(!fs::exists(dir / "a" / ".lock"));
  const auto summary = Json::parse(slurp(dir / "a" / "summary.json"));
  CHECK(summary["status"] == "completed");
  CHECK(parse_config(Json::parse(slurp(dir / "a" / "config.json"))) == load_config(cfg));

  // Same config and seed, fresh directory: byte-identical metrics.
  const auto cfg_b = write_config(dir, config_with(dir / "b"), "b.json");
  REQUIRE(train(cfg_b) == kExitOk);
  CHECK(slurp(dir / "b" / "metrics.csv") == csv);

  // Eval on the train split reproduces the logged accuracy of the last epoch.
  std::ostringstream eval_out, eval_out2;
  REQUIRE(cmd_eval(dir / "a" / "checkpoints" / "epoch-0003" / "teacher.json", cfg, {"train", {}}, eval_out, err) ==
          kExitOk);
  cmd_eval(dir / "a" / "checkpoints" / "epoch-0003" / "teacher.json", cfg, {"train", {}}, eval_out2, err);
  CHECK(eval_out.str() == eval_out2.str());
  const auto result = Json::parse(eval_out.str());
  const auto last = summary["final"]["teacher"];
  CHECK(result["top1"].get<double>() == last["top1-train"].get<double>());
}

TEST_CASE("resume through the command line reproduces the metrics") {
  const auto dir = scratch("cli-resume");
  const auto patch = Json{{"distill", {{"adm-form", "kd-kd"}}}};
  const auto full = write_config(dir, config_with(dir / "full", patch), "full.json");
  REQUIRE(train(full) == kExitOk);
  const auto part = write_config(dir, config_with(dir / "part", patch), "part.json");
  REQUIRE(train(part) == kExitOk);
  // Drop the final checkpoint and the tail of the metrics, as if the run died after epoch 1.
  fs::remove_all(dir / "part" / "checkpoints" / "epoch-0003");
  std::ofstream(dir / "part" / "metrics.csv", std::ios::app) << "3,student,garbage\n";
  REQUIRE(train(part, true) == kExitOk);
  CHECK(slurp(dir / "part" / "metrics.csv") == slurp(dir / "full" / "metrics.csv"));
}

TEST_CASE("train exit codes") {
  const auto dir = scratch("codes");
  std::ostringstream out, err;
  CHECK(cmd_train(write_config(dir, config_with(dir / "x", {{"distill", {{"tau", -1}}}})), {}, out, err) ==
        kExitConfig);
  CHECK(err.str().find("distill.tau") != std::string::npos);
  CHECK(cmd_train(dir / "missing.json", {}, out, err) == kExitConfig);

  const auto nan_cfg = write_config(dir, config_with(dir / "nan", {{"optim", {{"lr", 1e30}}}}), "nan.json");
  std::ostringstream nan_err;
  CHECK(cmd_train(nan_cfg, {}, out, nan_err) == kExitNumeric);
  CHECK(nan_err.str().find("ce[") != std::string::npos);
  CHECK(Json::parse(slurp(dir / "nan" / "summary.json"))["status"] == "numeric-abort");

  fs::create_directories(dir / "locked");
  std::ofstream(dir / "locked" / ".lock") << "";
  std::ostringstream lock_err;
  CHECK(cmd_train(write_config(dir, config_with(dir / "locked"), "l.json"), {}, out, lock_err) == kExitConfig);
  CHECK(lock_err.str().find("locked") != std::string::npos);
}

TEST_CASE("output directory override") {
  const auto dir = scratch("env");
  const auto cfg = write_config(dir, config_with(dir / "configured", {{"run", {{"epochs", 1}}}}));
  ::setenv(kOutputDirEnv, (dir / "override").c_str(), 1);
  const int code = train(cfg);
  ::unsetenv(kOutputDirEnv);
  CHECK(code == kExitOk);
  CHECK(fs::exists(dir / "override" / "metrics.csv"));
  CHECK(!fs::exists(dir / "configured"));
}

TEST_CASE("analyze") {
  const auto dir = scratch("analyze");
  const auto cfg = write_config(dir, config_with(dir / "run"));
  REQUIRE(train(cfg) == kExitOk);
  std::ostringstream out, err;
  REQUIRE(cmd_analyze(dir / "run", cfg, dir / "out", {}, out, err) == kExitOk);
  const auto curves = read_curves(dir / "out" / "curves.csv");
  bool self = false;
  std::set<std::string> metrics;
  for (const auto& p : curves) {
    metrics.insert(p.metric);
    if (p.metric == "reference-self-miou") self = p.value == 1.0;
    CHECK(p.value >= 0.0);
    CHECK(p.value <= 1.0);
  }
  CHECK(self);
  CHECK(metrics.contains("cam-miou/student"));
  CHECK(metrics.contains("similar-miou/teacher-student"));
  CHECK(metrics.contains("discrepancy-miou/teacher-student"));
  emit_curves(curves, dir / "again.csv");
  CHECK(slurp(dir / "again.csv") == slurp(dir / "out" / "curves.csv"));
  CHECK(slurp(dir / "out" / "similarity-stats-teacher-student.csv").starts_with("epoch,min,max,variance\n"));
  CHECK(fs::exists(dir / "out" / "masks" / "tor-0.pgm"));

  // The reference checkpoint scored against itself.
  const auto ref = Json::parse(slurp(dir / "out" / "analysis.json"))["reference"]["manifest"].get<std::string>();
  CHECK(cmd_analyze(dir / "run", cfg, dir / "out2", {{}, ref}, out, err) == kExitOk);

  fs::create_directories(dir / "empty");
  CHECK(cmd_analyze(dir / "empty", cfg, dir / "out3", {}, out, err) == kExitAnalysis);
  CHECK(cmd_analyze(dir / "run", cfg, dir / "out4", {{}, dir / "nope.json"}, out, err) == kExitAnalysis);
}

TEST_CASE("gradcheck command") {
  std::ostringstream out, err;
  const auto cases = default_gradcheck_registry();
  CHECK(cmd_gradcheck(out, err, cases) == kExitOk);
  const auto text = out.str();
  CHECK(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')) >= cases.size());
  for (const auto& c : cases) CHECK(text.find(c.name) != std::string::npos);

  // A backward that forgets half of the product rule.
  auto broken = cases;
  broken.push_back({"broken_square", [] {
                      Rng rng(1);
                      auto x = rand_uniform<double>({3}, rng, 0.5, 1.5);
                      return grad_check(
                          "broken_square", [](const TensorD& v) { return sum(mul(v, v.detach())); }, x);
                    }});
  std::ostringstream bad;
  CHECK(cmd_gradcheck(bad, err, broken) == kExitCheckFailure);
  CHECK(bad.str().find("broken_square") != std::string::npos);
}
