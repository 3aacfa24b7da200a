#pragma once

#include <vector>

#include "admkd/losses.hpp"
#include "oracles.hpp"

namespace fixture {

using namespace admkd;

inline oracle::Vec vec(const TensorD& t) { return {t.values().begin(), t.values().end()}; }

inline TensorD leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  auto t = rand_uniform<double>(std::move(shape), rng, lo, hi);
  t.set_requires_grad(true);
  return t;
}

/// Random student/teacher outputs with three stage taps at one spatial size.
struct Pair {
  std::size_t batch = 0, classes = 0, height = 0, width = 0;
  std::vector<std::size_t> cs, ct;
  PairOutputs<double> out;
  std::vector<AdapterT<double>> adapters;
  std::vector<Label> labels;
  std::vector<std::size_t> indices;

  std::size_t plane() const { return height * width; }
};

inline Pair random_pair(Rng& rng) {
  Pair p;
  p.batch = 1 + rng.uniform_int(4);
  p.classes = 2 + rng.uniform_int(7);
  p.height = 1 + rng.uniform_int(4);
  p.width = 1 + rng.uniform_int(4);
  for (std::size_t s = 0; s < 3; ++s) {
    p.cs.push_back(1 + rng.uniform_int(4));
    p.ct.push_back(1 + rng.uniform_int(5));
    p.out.student_features.push_back(leaf({p.batch, p.cs[s], p.height, p.width}, rng));
    p.out.teacher_features.push_back(leaf({p.batch, p.ct[s], p.height, p.width}, rng));
    auto a = rand_uniform<double>({p.ct[s], p.cs[s], 1, 1}, rng, -1.0, 1.0);
    a.set_requires_grad(true);
    p.adapters.push_back({a});
  }
  p.out.student_logits = leaf({p.batch, p.classes}, rng, -3.0, 3.0);
  p.out.teacher_logits = leaf({p.batch, p.classes}, rng, -3.0, 3.0);
  p.out.student_head = {leaf({p.classes, p.cs.back()}, rng), leaf({p.classes}, rng)};
  p.out.teacher_head = {leaf({p.classes, p.ct.back()}, rng), leaf({p.classes}, rng)};
  for (std::size_t b = 0; b < p.batch; ++b) {
    p.labels.push_back(static_cast<Label>(rng.uniform_int(p.classes)));
    p.indices.push_back(b * 7 + 3);
  }
  return p;
}

inline oracle::Vec head_oracle(const Pair& p, bool student, const oracle::Vec& weights, bool rectify = true) {
  const auto& f = student ? p.out.student_features.back() : p.out.teacher_features.back();
  const auto& h = student ? p.out.student_head : p.out.teacher_head;
  const std::size_t channels = student ? p.cs.back() : p.ct.back();
  return oracle::weighted_head(vec(f), weights, p.batch, channels, p.plane(), vec(h.weight), vec(*h.bias), p.classes,
                               rectify);
}

inline oracle::Sim similarity_oracle(const Pair& p) {
  const auto adapted = oracle::conv1x1(vec(p.out.student_features.back()), vec(p.adapters.back().weight), p.batch,
                                       p.cs.back(), p.ct.back(), p.plane());
  return oracle::similarity(adapted, vec(p.out.teacher_features.back()), p.batch, p.ct.back(), p.plane());
}

inline double feature_oracle(const Pair& p, oracle::Variant variant) {
  double total = 0.0;
  const std::size_t n = p.cs.size();
  for (std::size_t idx = 1; idx < n; ++idx) {
    const auto a = oracle::conv1x1(vec(p.out.student_features[idx]), vec(p.adapters[idx].weight), p.batch, p.cs[idx],
                                   p.ct[idx], p.plane());
    total += oracle::stage_error(a, vec(p.out.teacher_features[idx]), p.batch, p.ct[idx], p.plane(), variant) /
             std::pow(2.0, static_cast<double>(n - idx));
  }
  return total;
}

}  // namespace fixture
