#include <cmath>

#include "admkd/grad_check.hpp"
#include "admkd/losses.hpp"

namespace admkd {

namespace {

using Inputs = std::vector<TensorD>;

TensorD uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return rand_uniform<double>(std::move(shape), rng, lo, hi);
}

// Values bounded away from zero so relu/abs kinks stay outside the stencil.
TensorD off_zero(Shape shape, Rng& rng, double lo = 0.05, double hi = 1.0) {
  auto t = uniform(std::move(shape), rng, lo, hi);
  for (auto& v : t.mutable_values())
    if (rng.uniform() < 0.5) v = -v;
  return t;
}

// Reduce a tensor to a scalar through fixed random weights.
TensorD project(const TensorD& t, const TensorD& weights) { return sum(mul(t, weights)); }

std::vector<Label> random_labels(std::size_t batch, std::size_t classes, Rng& rng) {
  std::vector<Label> y(batch);
  for (auto& l : y) l = static_cast<Label>(rng.uniform_int(classes));
  return y;
}

struct Registry {
  std::uint64_t seed;
  std::vector<GradCheckCase> cases;

  template <typename Build>
  void add(std::string name, Build build) {
    const std::uint64_t case_seed = derive_seed(seed, {cases.size()});
    cases.push_back({name, [name, case_seed, build]() {
                       Rng rng(case_seed);
                       return build(name, rng);
                     }});
  }

  void unary(std::string name, std::function<TensorD(const TensorD&)> op, double lo, double hi, bool signed_input) {
    add(name, [op, lo, hi, signed_input](const std::string& n, Rng& rng) {
      const auto x = signed_input ? off_zero({3, 4}, rng, lo, hi) : uniform({3, 4}, rng, lo, hi);
      const auto w = uniform({3, 4}, rng);
      return grad_check(n, [&](const TensorD& v) { return project(op(v), w); }, x);
    });
  }
};

// Student/teacher outputs at desk size, features kept off the relu kink.
struct PairInstance {
  PairOutputs<double> out;
  std::vector<AdapterT<double>> adapters;
  std::vector<Label> labels;
  std::vector<std::size_t> indices;
};

PairInstance make_pair_instance(Rng& rng) {
  const std::size_t batch = 3, classes = 4, h = 3, w = 3;
  const std::size_t cs[] = {2, 3, 3}, ct[] = {3, 4, 5};
  PairInstance p;
  for (std::size_t s = 0; s < 3; ++s) {
    p.out.student_features.push_back(off_zero({batch, cs[s], h, w}, rng));
    p.out.teacher_features.push_back(off_zero({batch, ct[s], h, w}, rng));
    p.adapters.push_back({uniform({ct[s], cs[s], 1, 1}, rng)});
  }
  p.out.student_logits = uniform({batch, classes}, rng, -2, 2);
  p.out.teacher_logits = uniform({batch, classes}, rng, -2, 2);
  p.out.student_head = {uniform({classes, cs[2]}, rng), uniform({classes}, rng)};
  p.out.teacher_head = {uniform({classes, ct[2]}, rng), uniform({classes}, rng)};
  p.labels = random_labels(batch, classes, rng);
  for (std::size_t b = 0; b < batch; ++b) p.indices.push_back(2 * b);
  return p;
}

TeacherPredictionCache make_cache(const PairInstance& p, Rng& rng) {
  const std::size_t classes = p.out.teacher_logits.shape()[1];
  TeacherPredictionCache cache(classes);
  for (auto index : p.indices) {
    std::vector<float> row(classes);
    double total = 0.0;
    for (auto& v : row) total += (v = static_cast<float>(rng.uniform(0.05, 1.0)));
    for (auto& v : row) v = static_cast<float>(v / total);
    cache.stage(index, row);
  }
  cache.commit();
  return cache;
}

// Finite differences cannot honour stop-gradient, so total_loss is checked
// once per learner: the student pass perturbs only student-side inputs, the
// teacher pass only teacher-side ones, each against the loss terms that train
// that model. Inputs read by the detached similarity map stay fixed.
GradCheckReport total_loss_case(const std::string& name, Rng& rng, AdmForm form) {
  const auto p = make_pair_instance(rng);
  const auto cache = make_cache(p, rng);
  DistillConfig cfg = DistillConfig::imagenet_like();
  cfg.adm_form = form;
  cfg.tau = 2.0;
  const SoftTargetContext soft{&cache, p.indices, 0.4};

  const Inputs student{p.out.student_logits, p.out.student_features[0], p.out.student_features[1],
                       p.adapters[1].weight, p.out.student_head.weight, *p.out.student_head.bias};
  auto s = grad_check(
      name,
      [&](const Inputs& x) {
        PairOutputs<double> out = p.out;
        out.student_logits = x[0];
        out.student_features[0] = x[1];
        out.student_features[1] = x[2];
        out.student_head = {x[4], x[5]};
        auto adapters = p.adapters;
        adapters[1] = {x[3]};
        const auto parts = total_loss<double>(out, adapters, p.labels, cfg, soft);
        return add(add(parts.dml.per_model[0], mul_scalar(parts.feat, cfg.gamma)), parts.adm_weighted);
      },
      student);

  const Inputs teacher{p.out.teacher_logits, p.out.teacher_head.weight, *p.out.teacher_head.bias};
  const auto t = grad_check(
      name,
      [&](const Inputs& x) {
        PairOutputs<double> out = p.out;
        out.teacher_logits = x[0];
        out.teacher_head = {x[1], x[2]};
        const auto parts = total_loss<double>(out, p.adapters, p.labels, cfg, soft);
        return add(parts.dml.per_model[1], mul_scalar(parts.adm.di, cfg.beta));
      },
      teacher);

  if (!(t.max_relative_error <= s.max_relative_error)) s.max_relative_error = t.max_relative_error;
  s.passed = s.passed && t.passed;
  return s;
}

}  // namespace

std::vector<GradCheckCase> default_gradcheck_registry(std::uint64_t seed) {
  Registry r{seed, {}};

  // Elementwise and broadcasting arithmetic.
  auto binary = [&](std::string name, std::function<TensorD(const TensorD&, const TensorD&)> op, bool positive_b) {
    r.add(name, [op, positive_b](const std::string& n, Rng& rng) {
      const auto a = uniform({2, 3, 4}, rng);
      const auto b = positive_b ? uniform({3, 1}, rng, 0.5, 2.0) : uniform({3, 1}, rng);
      const auto w = uniform({2, 3, 4}, rng);
      return grad_check(n, [&](const Inputs& x) { return project(op(x[0], x[1]), w); }, Inputs{a, b});
    });
  };
  binary("add", [](const TensorD& a, const TensorD& b) { return add(a, b); }, false);
  binary("sub", [](const TensorD& a, const TensorD& b) { return sub(a, b); }, false);
  binary("mul", [](const TensorD& a, const TensorD& b) { return mul(a, b); }, false);
  binary("div", [](const TensorD& a, const TensorD& b) { return div(a, b); }, true);
  r.unary("add_scalar", [](const TensorD& x) { return add_scalar(x, 0.7); }, -1, 1, false);
  r.unary("mul_scalar", [](const TensorD& x) { return mul_scalar(x, -1.3); }, -1, 1, false);
  r.unary("neg", [](const TensorD& x) { return neg(x); }, -1, 1, false);
  r.unary("relu", [](const TensorD& x) { return relu(x); }, 0.05, 1, true);
  r.unary("exp", [](const TensorD& x) { return exp(x); }, -1, 1, false);
  r.unary("log", [](const TensorD& x) { return log(x); }, 0.2, 2, false);
  r.unary("sqrt", [](const TensorD& x) { return sqrt(x); }, 0.2, 2, false);
  r.unary("square", [](const TensorD& x) { return square(x); }, -1, 1, false);

  // Reductions and layout.
  r.add("sum", [](const std::string& n, Rng& rng) {
    const auto x = uniform({2, 3, 4}, rng);
    const auto w = uniform({2, 1, 4}, rng);
    return grad_check(n, [&](const TensorD& v) { return add(project(sum(v, {1}, true), w), sum(v)); }, x);
  });
  r.add("mean", [](const std::string& n, Rng& rng) {
    const auto x = uniform({2, 3, 4}, rng);
    const auto w = uniform({3}, rng);
    return grad_check(n, [&](const TensorD& v) { return add(project(mean(v, {0, 2}), w), mean(v)); }, x);
  });
  r.add("reshape", [](const std::string& n, Rng& rng) {
    const auto x = uniform({2, 6}, rng);
    const auto w = uniform({3, 4}, rng);
    return grad_check(n, [&](const TensorD& v) { return project(reshape(v, {3, 4}), w); }, x);
  });
  r.add("concat", [](const std::string& n, Rng& rng) {
    const Inputs xs{uniform({2, 2, 3}, rng), uniform({2, 3, 3}, rng)};
    const auto w = uniform({2, 5, 3}, rng);
    return grad_check(n, [&](const Inputs& x) { return project(concat<double>(x, 1), w); }, xs);
  });
  r.add("transpose", [](const std::string& n, Rng& rng) {
    const auto x = uniform({3, 5}, rng);
    const auto w = uniform({5, 3}, rng);
    return grad_check(n, [&](const TensorD& v) { return project(transpose(v), w); }, x);
  });

  // Linear algebra and convolution.
  r.add("matmul", [](const std::string& n, Rng& rng) {
    const Inputs xs{uniform({3, 4}, rng), uniform({4, 2}, rng)};
    const auto w = uniform({3, 2}, rng);
    return grad_check(n, [&](const Inputs& x) { return project(matmul(x[0], x[1]), w); }, xs);
  });
  r.add("linear", [](const std::string& n, Rng& rng) {
    const Inputs xs{uniform({4, 5}, rng), uniform({3, 5}, rng), uniform({3}, rng)};
    const auto w = uniform({4, 3}, rng);
    return grad_check(n, [&](const Inputs& x) { return project(linear(x[0], x[1], std::optional{x[2]}), w); }, xs);
  });
  r.add("conv2d[3x3,s1,p1]", [](const std::string& n, Rng& rng) {
    const Inputs xs{uniform({2, 3, 5, 5}, rng), uniform({4, 3, 3, 3}, rng)};
    const auto w = uniform({2, 4, 5, 5}, rng);
    return grad_check(n, [&](const Inputs& x) { return project(conv2d(x[0], x[1], 1, 1), w); }, xs);
  });
  r.add("conv2d[2x2,s2,p0]", [](const std::string& n, Rng& rng) {
    const Inputs xs{uniform({2, 2, 6, 6}, rng), uniform({3, 2, 2, 2}, rng)};
    const auto w = uniform({2, 3, 3, 3}, rng);
    return grad_check(n, [&](const Inputs& x) { return project(conv2d(x[0], x[1], 2, 0), w); }, xs);
  });
  r.add("gap", [](const std::string& n, Rng& rng) {
    const auto x = uniform({2, 3, 4, 4}, rng);
    const auto w = uniform({2, 3}, rng);
    return grad_check(n, [&](const TensorD& v) { return project(gap(v), w); }, x);
  });
  r.add("batch_norm[4d]", [](const std::string& n, Rng& rng) {
    const Inputs xs{uniform({3, 2, 3, 3}, rng), uniform({2}, rng, 0.5, 1.5), uniform({2}, rng)};
    const auto w = uniform({3, 2, 3, 3}, rng);
    return grad_check(
        n, [&](const Inputs& x) { return project(batch_norm<double>(x[0], x[1], x[2], 1e-5, nullptr, nullptr), w); }, xs);
  });
  r.add("batch_norm[2d]", [](const std::string& n, Rng& rng) {
    const Inputs xs{uniform({4, 3}, rng), uniform({3}, rng, 0.5, 1.5), uniform({3}, rng)};
    const auto w = uniform({4, 3}, rng);
    return grad_check(
        n, [&](const Inputs& x) { return project(batch_norm<double>(x[0], x[1], x[2], 1e-5, nullptr, nullptr), w); }, xs);
  });
  r.add("softmax", [](const std::string& n, Rng& rng) {
    const auto x = uniform({3, 5}, rng, -2, 2);
    const auto w = uniform({3, 5}, rng);
    return grad_check(n, [&](const TensorD& v) { return project(softmax(v, 1.0), w); }, x);
  });
  r.add("log_softmax[tau=2]", [](const std::string& n, Rng& rng) {
    const auto x = uniform({3, 5}, rng, -2, 2);
    const auto w = uniform({3, 5}, rng);
    return grad_check(n, [&](const TensorD& v) { return project(log_softmax(v, 2.0), w); }, x);
  });
  r.add("detach", [](const std::string& n, Rng& rng) {
    const auto x = uniform({2, 3}, rng);
    const auto w = uniform({2, 3}, rng);
    const auto zeros = TensorD::zeros({2, 3});
    return grad_check(n, [&](const TensorD& v) { return add(project(v, w), sum(mul(detach(v), zeros))); }, x);
  });

  // Losses.
  r.add("ce_loss", [](const std::string& n, Rng& rng) {
    const auto z = uniform({4, 6}, rng, -2, 2);
    const auto y = random_labels(4, 6, rng);
    return grad_check(n, [&](const TensorD& v) { return ce_loss(v, y); }, z);
  });
  for (double tau : {1.0, 3.0}) {
    r.add("kd_loss[tau=" + std::to_string(static_cast<int>(tau)) + "]", [tau](const std::string& n, Rng& rng) {
      const auto s = uniform({4, 6}, rng, -2, 2), t = uniform({4, 6}, rng, -2, 2);
      return grad_check(n, [&](const TensorD& v) { return kd_loss(v, t, tau); }, s);
    });
  }
  r.add("kd_to_target", [](const std::string& n, Rng& rng) {
    const auto s = uniform({3, 5}, rng, -2, 2);
    const auto q = softmax(uniform({3, 5}, rng, -2, 2), 1.0);
    return grad_check(n, [&](const TensorD& v) { return kd_to_target(v, q, 1.5); }, s);
  });
  for (std::size_t models : {2u, 3u}) {
    r.add("dml_loss[M=" + std::to_string(models) + "]", [models](const std::string& n, Rng& rng) {
      Inputs logits;
      for (std::size_t m = 0; m < models; ++m) logits.push_back(uniform({3, 4}, rng, -2, 2));
      const auto y = random_labels(3, 4, rng);
      return grad_check(
          n,
          [&](const TensorD& v) {
            Inputs all = logits;
            all[0] = v;
            return dml_loss<double>(all, y, 0.8, 2.0).per_model[0];
          },
          logits[0]);
    });
  }
  r.add("consensus_loss", [](const std::string& n, Rng& rng) {
    const auto p = make_pair_instance(rng);
    const auto s = similarity_map(adapt(p.adapters[2], p.out.student_features[2]), p.out.teacher_features[2]);
    const auto weights = consensus_weights(s, 1e-5);
    const Inputs xs{p.out.student_features[2], p.out.student_head.weight, *p.out.student_head.bias};
    return grad_check(
        n, [&](const Inputs& x) { return consensus_loss(LinearHeadT<double>{x[1], x[2]}, x[0], weights, p.labels); },
        xs);
  });
  r.add("divergence_loss", [](const std::string& n, Rng& rng) {
    const auto p = make_pair_instance(rng);
    const auto s = similarity_map(adapt(p.adapters[2], p.out.student_features[2]), p.out.teacher_features[2]);
    const auto weights = divergence_weights(s, 1e-5);
    const Inputs xs{p.out.teacher_features[2], p.out.teacher_head.weight, *p.out.teacher_head.bias};
    return grad_check(
        n, [&](const Inputs& x) { return divergence_loss(LinearHeadT<double>{x[1], x[2]}, x[0], weights, p.labels); },
        xs);
  });
  r.add("adm_loss", [](const std::string& n, Rng& rng) {
    const Inputs xs{uniform({}, rng, 0, 2), uniform({}, rng, 0, 2)};
    return grad_check(n, [&](const Inputs& x) { return adm_loss(x[0], x[1], 0.2, 0.6); }, xs);
  });
  const std::pair<FeatVariant, const char*> variants[] = {{FeatVariant::Plain, "plain"},
                                                          {FeatVariant::Norm, "norm"},
                                                          {FeatVariant::Relu, "relu"},
                                                          {FeatVariant::DropThird, "drop-third"}};
  for (const auto& [variant, label] : variants) {
    r.add(std::string("feature_mse_loss[") + label + "]", [variant](const std::string& n, Rng& rng) {
      const auto p = make_pair_instance(rng);
      const Inputs xs{p.out.student_features[1], p.out.student_features[2], p.adapters[1].weight,
                      p.adapters[2].weight};
      return grad_check(
          n,
          [&](const Inputs& x) {
            const Inputs fs{p.out.student_features[0], x[0], x[1]};
            const std::vector<AdapterT<double>> adapters{p.adapters[0], {x[2]}, {x[3]}};
            return feature_mse_loss<double>(fs, p.out.teacher_features, adapters, variant);
          },
          xs);
    });
  }
  r.add("adm_kd_consensus", [](const std::string& n, Rng& rng) {
    const auto p = make_pair_instance(rng);
    const auto s = similarity_map(adapt(p.adapters[2], p.out.student_features[2]), p.out.teacher_features[2]);
    const auto weights = consensus_weights(s, 1e-5);
    const auto zt = weighted_head_logits(p.out.teacher_head, p.out.teacher_features[2], weights);
    const Inputs xs{p.out.student_features[2], p.out.student_head.weight};
    return grad_check(
        n,
        [&](const Inputs& x) {
          const LinearHeadT<double> head{x[1], p.out.student_head.bias};
          return adm_kd_consensus(weighted_head_logits(head, x[0], weights), zt, 2.0);
        },
        xs);
  });
  r.add("adm_kd_divergence", [](const std::string& n, Rng& rng) {
    const auto p = make_pair_instance(rng);
    const auto cache = make_cache(p, rng);
    const auto s = similarity_map(adapt(p.adapters[2], p.out.student_features[2]), p.out.teacher_features[2]);
    const auto weights = divergence_weights(s, 1e-5);
    const Inputs xs{p.out.teacher_features[2], p.out.teacher_head.weight};
    return grad_check(
        n,
        [&](const Inputs& x) {
          const LinearHeadT<double> head{x[1], p.out.teacher_head.bias};
          return adm_kd_divergence(weighted_head_logits(head, x[0], weights), p.labels, cache, p.indices, 0.4, 1.5);
        },
        xs);
  });
  r.add("total_loss[ce-ce]", [](const std::string& n, Rng& rng) { return total_loss_case(n, rng, AdmForm::CeCe); });
  r.add("total_loss[kd-ce]", [](const std::string& n, Rng& rng) { return total_loss_case(n, rng, AdmForm::KdCe); });
  r.add("total_loss[kd-kd]", [](const std::string& n, Rng& rng) { return total_loss_case(n, rng, AdmForm::KdKd); });
  return r.cases;
}

}  // namespace admkd
