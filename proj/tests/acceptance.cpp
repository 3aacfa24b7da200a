// Acceptance run: one PASS/FAIL line per criterion, exit status 0 iff every
// hard criterion passed. The comparative check (7) reports but never fails
// the run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "admkd/checkpoint.hpp"
#include "admkd/commands.hpp"
#include "admkd/config.hpp"
#include "admkd/trainer.hpp"
#include "loss_fixtures.hpp"

using namespace admkd;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path work;
  std::size_t seeds = 5;
  bool toy_trained = false;
  bool toy_ok = false;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path fresh(const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_json(const fs::path& p, const Json& j) {
  std::ofstream(p) << j.dump(2);
  return p;
}

std::vector<std::uint64_t> checksums(const RunState& s) {
  std::vector<std::uint64_t> out;
  for (const auto& m : s.models) out.push_back(m.checksum());
  return out;
}

// The toy setup shared by criteria 6, 7 and 9.
Json toy_config(const fs::path& out) {
  Json j = Json::parse(R"({
    "models": [
      {"name": "student", "role": "student", "arch": "tiny-b"},
      {"name": "teacher", "role": "teacher", "arch": "tiny-a"}
    ],
    "data": {"source": "blobs", "classes": 4, "train-per-class": 200, "test-per-class": 50,
             "shape": [1, 16, 16], "noise": 0.1, "seed": 1},
    "distill": {"preset": "imagenet-like"},
    "optim": {"lr": 0.05, "milestones": [15, 30, 45]},
    "run": {"mode": "online", "epochs": 50, "batch-size": 64, "seed": 0, "checkpoint-every": 5}
  })");
  j["run"]["output-dir"] = out.string();
  return j;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite(Context&) {
  const auto t0 = Clock::now();
  const auto cases = default_gradcheck_registry();
  double worst = 0.0;
  std::string worst_name, failed;
  for (const auto& c : cases) {
    const auto r = c.run();
    if (worst_name.empty() || r.max_relative_error > worst) {
      worst = r.max_relative_error;
      worst_name = r.op_name;
    }
    if (!r.passed || !(r.max_relative_error <= 1e-4)) failed += " " + r.op_name;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = failed.empty() && secs < 120.0;
  o.detail = fmt("%zu cases, max rel err %.2e (%s) <= 1e-4, %.1f s < 120 s", cases.size(), worst, worst_name.c_str(),
                 secs);
  if (!failed.empty()) o.detail += "; failed:" + failed;
  return o;
}

// ---------------------------------------------------------------------------

Outcome oracle_equivalence(Context&) {
  constexpr int kInstances = 100;
  constexpr double kTol = 1e-6;
  std::map<std::string, double> worst;
  std::map<std::string, int> count;
  auto record = [&](const std::string& name, double got, double want) {
    const double d = std::abs(got - want);
    worst[name] = std::max(worst[name], std::isfinite(d) ? d : 1e300);
    ++count[name];
  };
  auto labels = [](Rng& rng, std::size_t b, std::size_t c) {
    std::vector<Label> y(b);
    for (auto& l : y) l = static_cast<Label>(rng.uniform_int(c));
    return y;
  };
  using fixture::vec;

  Rng rng(2024);
  for (int i = 0; i < kInstances; ++i) {
    const std::size_t b = 1 + rng.uniform_int(4), c = 2 + rng.uniform_int(7);
    const auto s = rand_uniform<double>({b, c}, rng, -4, 4), t = rand_uniform<double>({b, c}, rng, -4, 4);
    const auto y = labels(rng, b, c);
    const double tau = rng.uniform(0.5, 4.0);
    record("ce", ce_loss(s, y).item(), oracle::ce(vec(s), b, c, y));
    record("kd", kd_loss(s, t, tau).item(), oracle::kd(vec(s), vec(t), b, c, tau));
  }
  for (int i = 0; i < kInstances; ++i) {
    const std::size_t m = 2 + rng.uniform_int(3), b = 1 + rng.uniform_int(4), c = 2 + rng.uniform_int(7);
    std::vector<TensorD> logits;
    std::vector<oracle::Vec> raw;
    for (std::size_t k = 0; k < m; ++k) {
      logits.push_back(rand_uniform<double>({b, c}, rng, -3, 3));
      raw.push_back(vec(logits.back()));
    }
    const auto y = labels(rng, b, c);
    const double lambda = rng.uniform(0, 2), tau = rng.uniform(0.5, 3);
    const auto got = dml_loss<double>(logits, y, lambda, tau);
    const auto want = oracle::dml_per_model(raw, b, c, y, lambda, tau);
    double total = 0;
    for (std::size_t k = 0; k < m; ++k) total += want[k];
    double per_model = 0;
    for (std::size_t k = 0; k < m; ++k) per_model = std::max(per_model, std::abs(got.per_model[k].item() - want[k]));
    record("dml", got.total.item(), total);
    record("dml-per-model", per_model, 0.0);
  }
  for (int i = 0; i < kInstances; ++i) {
    const auto p = fixture::random_pair(rng);
    const double eps = 1e-5, tau = rng.uniform(0.5, 3);
    const auto& fs_last = p.out.student_features.back();
    const auto& ft_last = p.out.teacher_features.back();
    const auto sim = similarity_map(adapt(p.adapters.back(), fs_last), ft_last);
    const auto want = fixture::similarity_oracle(p);
    double sim_err = 0;
    for (std::size_t k = 0; k < want.values.size(); ++k)
      sim_err = std::max(sim_err, std::abs(sim.values.values()[k] - std::clamp(want.values[k], -1.0, 1.0)));
    record("similarity", sim_err, 0.0);

    const auto co_w = consensus_weights(sim, eps), di_w = divergence_weights(sim, eps);
    const auto co_o = oracle::consensus_weights(want, p.batch, p.plane(), eps);
    const auto di_o = oracle::divergence_weights(want, p.batch, p.plane(), eps);
    const auto zs_co = fixture::head_oracle(p, true, co_o), zt_co = fixture::head_oracle(p, false, co_o);
    const auto zt_di = fixture::head_oracle(p, false, di_o);
    record("consensus", consensus_loss(p.out.student_head, fs_last, co_w, p.labels).item(),
           oracle::ce(zs_co, p.batch, p.classes, p.labels));
    record("divergence", divergence_loss(p.out.teacher_head, ft_last, di_w, p.labels).item(),
           oracle::ce(zt_di, p.batch, p.classes, p.labels));
    const auto co = TensorD::scalar(oracle::ce(zs_co, p.batch, p.classes, p.labels));
    const auto di = TensorD::scalar(oracle::ce(zt_di, p.batch, p.classes, p.labels));
    const double alpha = rng.uniform(0, 1), beta = rng.uniform(0, 1);
    record("adm", adm_loss(co, di, alpha, beta).item(), alpha * co.item() + beta * di.item());
    record("adm-kd-consensus",
           adm_kd_consensus(weighted_head_logits(p.out.student_head, fs_last, co_w),
                            weighted_head_logits(p.out.teacher_head, ft_last, co_w), tau)
               .item(),
           oracle::kd(zs_co, zt_co, p.batch, p.classes, tau));
  }
  for (int i = 0; i < kInstances; ++i) {
    const std::size_t b = 1 + rng.uniform_int(4), c = 2 + rng.uniform_int(7);
    const auto z = rand_uniform<double>({b, c}, rng, -3, 3);
    const auto y = labels(rng, b, c);
    std::vector<std::size_t> idx(b);
    TeacherPredictionCache cache(c);
    for (std::size_t k = 0; k < b; ++k) {
      idx[k] = 3 * k + 2;
      std::vector<float> row(c);
      double sum = 0;
      for (auto& v : row) sum += (v = static_cast<float>(rng.uniform(0.01, 1)));
      for (auto& v : row) v = static_cast<float>(v / sum);
      cache.stage(idx[k], row);
    }
    cache.commit();
    const double delta = rng.uniform(), tau = rng.uniform(0.5, 3);
    oracle::Vec q(b * c);
    for (std::size_t k = 0; k < b; ++k)
      for (std::size_t j = 0; j < c; ++j)
        q[k * c + j] = (1 - delta) * (static_cast<Label>(j) == y[k] ? 1.0 : 0.0) + delta * cache.at(idx[k])[j];
    record("adm-kd-divergence", adm_kd_divergence(z, y, cache, idx, delta, tau).item(),
           oracle::kl_target(vec(z), q, b, c, tau));
  }
  const std::pair<FeatVariant, oracle::Variant> variants[] = {{FeatVariant::Plain, oracle::Variant::Plain},
                                                              {FeatVariant::Norm, oracle::Variant::Norm},
                                                              {FeatVariant::Relu, oracle::Variant::Relu},
                                                              {FeatVariant::DropThird, oracle::Variant::DropThird}};
  for (int i = 0; i < kInstances; ++i) {
    const auto p = fixture::random_pair(rng);
    for (const auto& [v, o] : variants)
      record("feat-" + to_string(v),
             feature_mse_loss<double>(p.out.student_features, p.out.teacher_features, p.adapters, v).item(),
             fixture::feature_oracle(p, o));
  }
  for (int i = 0; i < kInstances; ++i) {
    const auto p = fixture::random_pair(rng);
    DistillConfig cfg;
    cfg.alpha = rng.uniform(0, 1);
    cfg.beta = rng.uniform(0, 1);
    cfg.gamma = rng.uniform(0, 1);
    cfg.lambda = rng.uniform(0, 2);
    cfg.tau = rng.uniform(0.5, 3);
    cfg.adm_form = i % 2 ? AdmForm::CeCe : AdmForm::KdCe;
    const auto dml = oracle::dml_per_model({vec(p.out.student_logits), vec(p.out.teacher_logits)}, p.batch,
                                           p.classes, p.labels, cfg.lambda, cfg.tau);
    const auto sim = fixture::similarity_oracle(p);
    const auto co_w = oracle::consensus_weights(sim, p.batch, p.plane(), cfg.eps);
    const auto di_w = oracle::divergence_weights(sim, p.batch, p.plane(), cfg.eps);
    const double co = cfg.adm_form == AdmForm::CeCe
                          ? oracle::ce(fixture::head_oracle(p, true, co_w), p.batch, p.classes, p.labels)
                          : oracle::kd(fixture::head_oracle(p, true, co_w), fixture::head_oracle(p, false, co_w),
                                       p.batch, p.classes, cfg.tau);
    const double di = oracle::ce(fixture::head_oracle(p, false, di_w), p.batch, p.classes, p.labels);
    const double want = dml[0] + dml[1] + cfg.gamma * fixture::feature_oracle(p, oracle::Variant::Plain) +
                        cfg.alpha * co + cfg.beta * di;
    record("total", total_loss<double>(p.out, p.adapters, p.labels, cfg).total.item(), want);
  }

  Outcome o;
  o.pass = true;
  std::string worst_name;
  double overall = 0;
  for (const auto& [name, err] : worst) {
    if (!(err <= kTol) || count[name] < kInstances) o.pass = false;
    if (err >= overall) {
      overall = err;
      worst_name = name;
    }
  }
  o.detail = fmt("%zu losses x %d instances, max abs diff %.2e (%s) <= 1e-6", worst.size(), kInstances, overall,
                 worst_name.c_str());
  return o;
}

// ---------------------------------------------------------------------------

SimilarityMapT<double> map_of(std::size_t h, std::size_t w, std::vector<double> v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  return {TensorD({1, h, w}, std::move(v)), TensorD({1}, {m})};
}

Outcome attention_invariants(Context&) {
  constexpr double eps = 1e-5;
  Rng rng(77);
  std::size_t fields = 0, negatives = 0, mean_checks = 0, mean_misses = 0;
  double worst_mean = 0;
  auto check = [&](std::size_t h, std::size_t w, std::vector<double> v) {
    ++fields;
    double one_plus = 0, one_minus = 0;
    for (double x : v) {
      one_plus += 1 + x;
      one_minus += 1 - x;
    }
    one_plus /= static_cast<double>(v.size());
    one_minus /= static_cast<double>(v.size());
    const auto s = map_of(h, w, std::move(v));
    const auto co = consensus_weights(s, eps), di = divergence_weights(s, eps);
    for (const auto& [field, denom] : {std::pair{&co, one_plus}, std::pair{&di, one_minus}}) {
      double mean = 0;
      for (double x : field->values()) {
        if (!(x >= 0.0) || !std::isfinite(x)) ++negatives;
        mean += x;
      }
      mean /= static_cast<double>(field->numel());
      if (denom >= 0.01) {
        ++mean_checks;
        worst_mean = std::max(worst_mean, std::abs(mean - 1));
        if (std::abs(mean - 1) > 1e-3) ++mean_misses;
      }
    }
  };
  for (int i = 0; i < 2000; ++i) {
    const std::size_t h = 1 + rng.uniform_int(6), w = 1 + rng.uniform_int(6);
    std::vector<double> v(h * w);
    const int kind = i % 4;
    const double centre = rng.uniform(-1, 1), spread = kind == 0 ? 1.0 : kind == 1 ? 0.2 : 0.01;
    for (auto& x : v) x = kind == 3 ? (rng.uniform() < 0.5 ? -1.0 : 1.0) : std::clamp(centre + rng.uniform(-spread, spread), -1.0, 1.0);
    check(h, w, v);
  }
  for (double c : {-1.0, -0.999, 0.0, 0.999, 1.0}) check(6, 6, std::vector<double>(36, c));

  // S ≡ 1 everywhere: divergence weights vanish without overflow.
  const auto ones = divergence_weights(map_of(6, 6, std::vector<double>(36, 1.0)), eps);
  bool zero = true;
  for (double x : ones.values()) zero = zero && x == 0.0 && std::isfinite(x);
  const auto ones_f = divergence_weights(SimilarityMap{Tensor::full({2, 6, 6}, 1.0f), Tensor::full({2}, 1.0f)}, eps);
  for (float x : ones_f.values()) zero = zero && x == 0.0f && std::isfinite(x);

  Outcome o;
  o.pass = negatives == 0 && mean_misses == 0 && zero;
  o.detail = fmt("%zu fields, %zu negative or non-finite weights, %zu/%zu means off by > 1e-3 (worst %.1e), "
                 "S=1 gives zero divergence weights: %s",
                 fields, negatives, mean_misses, mean_checks, worst_mean, zero ? "yes" : "no");
  return o;
}

// ---------------------------------------------------------------------------

std::vector<double> grad_of(const TensorD& t) {
  if (!t.has_grad()) return std::vector<double>(t.numel(), 0.0);
  return {t.grad().begin(), t.grad().end()};
}

Outcome detach_contracts(Context&) {
  // Teacher parameters see nothing from the feature loss.
  const std::array<std::size_t, 3> shape{1, 16, 16};
  Model student(tiny_b(shape, 4), 11), teacher(tiny_a(shape, 4), 12);
  Rng rng(13);
  const auto x = rand_uniform<float>({4, 1, 16, 16}, rng, 0, 1);
  std::size_t teacher_nonzero = 0, student_nonzero = 0, variants = 0;
  for (auto v : {FeatVariant::Plain, FeatVariant::Norm, FeatVariant::Relu, FeatVariant::DropThird}) {
    student.zero_grad();
    teacher.zero_grad();
    const auto s = student.forward(x, true), t = teacher.forward(x, true);
    std::vector<Adapter> adapters;
    for (std::size_t k = 0; k < s.features.size(); ++k)
      adapters.push_back(Adapter::kaiming(s.features[k].shape()[1], t.features[k].shape()[1], rng));
    feature_mse_loss<float>(s.features, t.features, adapters, v).backward();
    for (const auto& p : teacher.parameters())
      if (p.tensor.has_grad())
        for (float g : p.tensor.grad()) teacher_nonzero += g != 0.0f;
    for (const auto& p : student.parameters())
      if (p.tensor.has_grad())
        for (float g : p.tensor.grad()) student_nonzero += g != 0.0f;
    ++variants;
  }

  // A constant copy of S leaves every gradient bit-identical.
  std::size_t mismatches = 0, trials = 0;
  Rng prng(14);
  for (int i = 0; i < 50; ++i) {
    for (auto form : {AdmForm::CeCe, AdmForm::KdCe}) {
      auto p = fixture::random_pair(prng);
      DistillConfig cfg;
      const auto& fs = p.out.student_features.back();
      const auto& ft = p.out.teacher_features.back();
      auto run = [&](const SimilarityMapT<double>& s) {
        for (TensorD t : {fs, ft, p.out.student_head.weight, p.out.teacher_head.weight, p.adapters.back().weight})
          t.zero_grad();
        const auto co_w = consensus_weights(s, cfg.eps), di_w = divergence_weights(s, cfg.eps);
        const TensorD co = form == AdmForm::CeCe
                               ? consensus_loss(p.out.student_head, fs, co_w, p.labels)
                               : adm_kd_consensus(weighted_head_logits(p.out.student_head, fs, co_w),
                                                  weighted_head_logits(p.out.teacher_head, ft, co_w), cfg.tau);
        adm_loss(co, divergence_loss(p.out.teacher_head, ft, di_w, p.labels), 0.2, 0.6).backward();
        return std::vector{grad_of(fs), grad_of(ft), grad_of(p.out.student_head.weight),
                           grad_of(p.out.teacher_head.weight), grad_of(p.adapters.back().weight)};
      };
      const auto live = similarity_map(adapt(p.adapters.back(), fs), ft);
      const auto a = run(live);
      const auto b = run({live.values.clone(), live.mean.clone()});
      ++trials;
      if (a != b) ++mismatches;
      for (double g : a.back()) mismatches += g != 0.0;
    }
  }

  Outcome o;
  o.pass = teacher_nonzero == 0 && student_nonzero > 0 && mismatches == 0;
  o.detail = fmt("feature loss: %zu nonzero teacher grads over %zu variants (student %zu nonzero); "
                 "constant S copy: %zu/%zu gradient mismatches",
                 teacher_nonzero, variants, student_nonzero, mismatches, trials);
  return o;
}

// ---------------------------------------------------------------------------

std::vector<Tensor> params_of(const Model& m) {
  std::vector<Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.tensor);
  return out;
}

Outcome reduction_ladder(Context&) {
  const auto config = parse_config(toy_config("unused"));
  auto plan = config.plan;
  plan.epochs = 3;
  plan.optim.schedule.milestones = {2};
  const auto data = synth_blobs(4, 40, {1, 16, 16}, 0.1, 9);

  // Rung 1: ADM and features off is mutual learning.
  plan.distill.alpha = plan.distill.beta = plan.distill.gamma = 0.0;
  auto trained = RunState::create(plan);
  auto manual = RunState::create(plan);
  std::size_t dml_epochs = 0;
  for (std::size_t epoch = 0; epoch < plan.epochs; ++epoch) {
    train_epoch_online(trained, data, epoch);
    const double lr = lr_at(plan.optim.schedule, epoch);
    for (const auto& idx : epoch_batches(plan, data.size(), epoch)) {
      const auto batch = gather(data, idx);
      const auto s = manual.models[0].forward(batch.images, true);
      const auto t = manual.models[1].forward(batch.images, true);
      const std::vector<Tensor> logits{s.logits, t.logits};
      const auto dml = dml_loss<float>(logits, batch.labels, plan.distill.lambda, plan.distill.tau);
      for (auto& m : manual.models) m.zero_grad();
      dml.total.backward();
      for (std::size_t i = 0; i < 2; ++i) {
        manual.optims[i].lr = lr;
        auto params = params_of(manual.models[i]);
        sgd_step(params, manual.optims[i]);
      }
    }
    dml_epochs += checksums(trained) == checksums(manual);
  }

  // Rung 2: also λ = 0 is two independent CE trainings on one batch stream.
  plan.distill.lambda = 0.0;
  auto online = RunState::create(plan);
  auto solo_plan = plan;
  solo_plan.mode = RunMode::Independent;
  solo_plan.models = {plan.models[0]};
  auto solo_student = RunState::create(solo_plan);
  solo_plan.models = {plan.models[1]};
  auto solo_teacher = RunState::create(solo_plan);
  std::size_t ce_epochs = 0;
  for (std::size_t epoch = 0; epoch < plan.epochs; ++epoch) {
    train_epoch_online(online, data, epoch);
    train_epoch_independent(solo_student, data, epoch);
    train_epoch_independent(solo_teacher, data, epoch);
    ce_epochs += online.models[0].checksum() == solo_student.models[0].checksum() &&
                 online.models[1].checksum() == solo_teacher.models[0].checksum();
  }

  Outcome o;
  o.pass = dml_epochs == plan.epochs && ce_epochs == plan.epochs;
  o.detail = fmt("alpha=beta=gamma=0 vs mutual learning: %zu/%zu epochs bit-identical; "
                 "with lambda=0 vs two CE runs: %zu/%zu",
                 dml_epochs, plan.epochs, ce_epochs, plan.epochs);
  return o;
}

// ---------------------------------------------------------------------------

Outcome toy_training(Context& ctx) {
  const auto dir = fresh(ctx.work / "toy");
  const auto cfg = write_json(dir / "config.json", toy_config(dir / "run"));
  std::ostringstream out, err;
  const auto t0 = Clock::now();
  const int code = cmd_train(cfg, {}, out, err);
  const double secs = seconds_since(t0);
  ctx.toy_trained = true;
  Outcome o;
  if (code != kExitOk) {
    o.detail = fmt("train exited %d: %s", code, err.str().c_str());
    return o;
  }
  const auto summary = Json::parse(slurp(dir / "run" / "summary.json"));
  const auto& fin = summary["final"];
  const double st = fin["student"]["top1-train"].get<double>(), se = fin["student"]["top1-test"].get<double>();
  const double tt = fin["teacher"]["top1-train"].get<double>(), te = fin["teacher"]["top1-test"].get<double>();
  o.pass = summary["status"] == "completed" && st >= 0.95 && tt >= 0.95 && se >= 0.90 && te >= 0.90 && secs < 300.0;
  ctx.toy_ok = summary["status"] == "completed";
  o.detail = fmt("student train %.3f test %.3f, teacher train %.3f test %.3f (>= 0.95 / 0.90), status %s, "
                 "%.0f s < 300 s",
                 st, se, tt, te, summary["status"].get<std::string>().c_str(), secs);
  return o;
}

// ---------------------------------------------------------------------------

Outcome comparative(Context& ctx) {
  const auto dir = fresh(ctx.work / "comparative");
  std::ofstream report(dir / "report.csv");
  report << "seed,adm-student-top1-test,independent-student-top1-test\n";
  double adm_sum = 0, ind_sum = 0;
  const auto t0 = Clock::now();
  for (std::size_t seed = 0; seed < ctx.seeds; ++seed) {
    auto j = toy_config(dir);
    j["data"]["seed"] = 1 + seed;
    j["data"]["label-noise"] = 0.3;
    j["run"]["seed"] = seed;
    const auto config = parse_config(j);
    const auto [train, test] = load_datasets(config.data);

    auto adm = RunState::create(config.plan);
    for (std::size_t e = 0; e < config.plan.epochs; ++e) train_epoch_online(adm, train, e);
    const double a = evaluate(adm.models[0], test).top1;

    auto plan = config.plan;
    plan.mode = RunMode::Independent;
    plan.models = {config.plan.models[0]};
    auto ind = RunState::create(plan);
    for (std::size_t e = 0; e < plan.epochs; ++e) train_epoch_independent(ind, train, e);
    const double b = evaluate(ind.models[0], test).top1;

    report << seed << ',' << fmt("%.6f", a) << ',' << fmt("%.6f", b) << '\n';
    adm_sum += a;
    ind_sum += b;
  }
  const double n = static_cast<double>(ctx.seeds);
  report << "mean," << fmt("%.6f", adm_sum / n) << ',' << fmt("%.6f", ind_sum / n) << '\n';
  Outcome o;
  o.pass = adm_sum / n >= ind_sum / n;
  o.detail = fmt("mean student test top1 over %zu seeds, 30%% label noise: DML+ADM %.4f vs independent %.4f "
                 "(%.0f s, report %s)%s",
                 ctx.seeds, adm_sum / n, ind_sum / n, seconds_since(t0), (dir / "report.csv").c_str(),
                 o.pass ? "" : " [regression flagged, not fatal]");
  return o;
}

// ---------------------------------------------------------------------------

Outcome determinism(Context& ctx) {
  const auto dir = fresh(ctx.work / "determinism");
  auto small = [&](const fs::path& out) {
    auto j = toy_config(out);
    j["data"]["train-per-class"] = 24;
    j["data"]["test-per-class"] = 8;
    j["data"]["augment"] = {{"enabled", true}, {"pad", 2}, {"hflip", 0.5}};
    j["distill"]["adm-form"] = "kd-kd";
    j["optim"]["milestones"] = {3};
    j["run"]["epochs"] = 5;
    j["run"]["batch-size"] = 16;
    j["run"]["checkpoint-every"] = 1;
    return j;
  };
  std::ostringstream out, err;
  auto train = [&](const std::string& name, bool resume = false) {
    return cmd_train(write_json(dir / (name + ".json"), small(dir / name)), {resume}, out, err);
  };
  Outcome o;
  if (train("a") || train("b") || train("part")) {
    o.detail = "train failed: " + err.str();
    return o;
  }
  const auto csv = slurp(dir / "a" / "metrics.csv");
  const bool rerun = !csv.empty() && csv == slurp(dir / "b" / "metrics.csv");

  // Kill the run after epoch 2: drop later checkpoints and corrupt the metrics tail.
  for (const char* e : {"epoch-0003", "epoch-0004"}) fs::remove_all(dir / "part" / "checkpoints" / e);
  std::ofstream(dir / "part" / "metrics.csv", std::ios::app) << "3,student,partial\n";
  if (train("part", true)) {
    o.detail = "resume failed: " + err.str();
    return o;
  }
  const bool resumed = slurp(dir / "part" / "metrics.csv") == csv;
  bool blobs = true;
  for (const char* m : {"student.bin", "teacher.bin"})
    blobs = blobs && slurp(dir / "part" / "checkpoints" / "epoch-0004" / m) ==
                         slurp(dir / "a" / "checkpoints" / "epoch-0004" / m);
  o.pass = rerun && resumed && blobs;
  o.detail = fmt("rerun metrics.csv byte-identical: %s; resume from epoch 2 metrics identical: %s; "
                 "final weights identical: %s",
                 rerun ? "yes" : "no", resumed ? "yes" : "no", blobs ? "yes" : "no");
  return o;
}

// ---------------------------------------------------------------------------

Outcome analysis_pipeline(Context& ctx) {
  Outcome o;
  if (!ctx.toy_trained && fs::exists(ctx.work / "toy" / "run" / "summary.json")) {
    ctx.toy_trained = true;
    ctx.toy_ok = Json::parse(slurp(ctx.work / "toy" / "run" / "summary.json"))["status"] == "completed";
  }
  if (!ctx.toy_trained) {
    const auto r = toy_training(ctx);
    std::cout << "  (toy run for analysis: " << r.detail << ")\n";
  }
  if (!ctx.toy_ok) {
    o.detail = "toy run did not complete";
    return o;
  }
  const auto toy = ctx.work / "toy";
  const auto out_dir = ctx.work / "analysis";
  fs::remove_all(out_dir);
  std::ostringstream out, err;
  if (const int code = cmd_analyze(toy / "run", toy / "config.json", out_dir, {}, out, err); code != kExitOk) {
    o.detail = fmt("analyze exited %d: %s", code, err.str().c_str());
    return o;
  }

  const auto curves = read_curves(out_dir / "curves.csv");
  std::map<std::string, std::size_t> points;
  bool self_one = true, in_range = true;
  for (const auto& p : curves) {
    ++points[p.metric];
    if (p.metric == "reference-self-miou") self_one = self_one && p.value == 1.0;
    in_range = in_range && p.value >= 0.0 && p.value <= 1.0;
  }
  bool curves_ok = points.contains("reference-self-miou");
  for (const char* m : {"cam-miou/student", "cam-miou/teacher", "similar-miou/teacher-student",
                        "discrepancy-miou/teacher-student"})
    curves_ok = curves_ok && points[m] >= 10;

  // Similarity regions partition the grid on every test sample at every checkpoint.
  const auto config = load_config(toy / "config.json");
  const auto [train, test] = load_datasets(config.data);
  std::size_t maps = 0, violations = 0;
  for (const auto& info : list_checkpoints(toy / "run")) {
    if (info.role != Role::Student) continue;
    auto student = load_model(info.manifest);
    auto teacher_manifest = info.manifest.parent_path() / "teacher.json";
    auto teacher = load_model(teacher_manifest);
    const auto adapters = load_adapters(info.manifest, "teacher");
    NoGradGuard guard;
    const auto s = student.forward(test.images, false), t = teacher.forward(test.images, false);
    const auto sim = similarity_map(adapt(adapters.back(), s.features.back()), t.features.back());
    const auto& shape = sim.values.shape();
    const std::size_t plane = shape[1] * shape[2];
    const auto values = sim.values.values();
    for (std::size_t b = 0; b < shape[0]; ++b) {
      const Tensor one({shape[1], shape[2]},
                       std::vector<float>(values.begin() + b * plane, values.begin() + (b + 1) * plane));
      const auto [similar, discrepant] = similarity_regions(one);
      for (std::size_t k = 0; k < plane; ++k) violations += (similar.values[k] != 0) == (discrepant.values[k] != 0);
      ++maps;
    }
  }

  // Stat table format.
  std::ifstream table(out_dir / "similarity-stats-teacher-student.csv");
  std::string line;
  std::getline(table, line);
  bool table_ok = line == "epoch,min,max,variance";
  std::size_t rows = 0;
  while (std::getline(table, line)) {
    double e, lo, hi, var;
    table_ok = table_ok && std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf", &e, &lo, &hi, &var) == 4 && lo <= hi &&
               var >= 0.0 && std::count(line.begin(), line.end(), ',') == 3;
    ++rows;
  }
  table_ok = table_ok && rows >= 10;

  o.pass = curves_ok && self_one && in_range && maps > 0 && violations == 0 && table_ok;
  o.detail = fmt("%zu curves (%zu points), self mIoU == 1: %s; %zu similarity maps, %zu partition violations; "
                 "stat table epoch/min/max/variance with %zu rows: %s",
                 points.size(), curves.size(), self_one ? "yes" : "no", maps, violations, rows,
                 table_ok ? "ok" : "bad");
  return o;
}

// ---------------------------------------------------------------------------

Outcome delta_schedule(Context&) {
  std::size_t checked = 0, exact = 0;
  std::string misses;
  for (std::size_t e : {3u, 4u, 5u, 10u, 11u, 50u, 51u, 100u, 200u, 201u, 300u}) {
    const double got[] = {delta_at(0.2, 0.6, 0, e), delta_at(0.2, 0.6, e / 2, e), delta_at(0.2, 0.6, e - 1, e)};
    const double want[] = {0.2, 0.4, 0.6};
    for (int k = 0; k < 3; ++k) {
      ++checked;
      if (got[k] == want[k]) ++exact;
      else misses += fmt(" E=%zu:%.17g", e, got[k]);
    }
  }
  // The trainer reads the same schedule through the distill config.
  const auto cfg = DistillConfig::imagenet_like();
  const bool defaults = cfg.delta_start == 0.2 && cfg.delta_end == 0.6;
  Outcome o;
  o.pass = exact == checked && defaults;
  o.detail = fmt("%zu/%zu values exact at epochs {0, E/2, E-1}, default range 0.2..0.6: %s", exact, checked,
                 defaults ? "yes" : "no") +
             misses;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"admkd acceptance checks"};
  std::vector<int> only;
  Context ctx;
  ctx.work = fs::temp_directory_path() / "admkd-acceptance";
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 10));
  app.add_option("--work", ctx.work, "scratch directory for runs and reports");
  app.add_option("--seeds", ctx.seeds, "seeds for the comparative check")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome(Context&)>>> criteria = {
      {"gradient suite", gradient_suite},     {"oracle equivalence", oracle_equivalence},
      {"attention invariants", attention_invariants}, {"detach contracts", detach_contracts},
      {"reduction ladder", reduction_ladder}, {"toy training", toy_training},
      {"comparative smoke", comparative},     {"determinism", determinism},
      {"analysis pipeline", analysis_pipeline}, {"delta schedule", delta_schedule},
  };
  const std::set<int> selected(only.begin(), only.end());
  fs::create_directories(ctx.work);
  int hard_failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.contains(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << " (" << criteria[i].first << "): " << o.detail
              << std::endl;
    if (!o.pass && id != 7) ++hard_failures;
  }
  return hard_failures == 0 ? 0 : 1;
}
