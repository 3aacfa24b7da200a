#include "admkd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace admkd {

namespace {

template <typename S>
using NodePtr = std::shared_ptr<detail::Node<S>>;

template <typename S>
using BackwardFn = std::function<void(detail::Node<S>&)>;

template <typename S>
TensorT<S> make_result(Shape shape, std::vector<S> values, const char* op,
                       std::vector<NodePtr<S>> parents, BackwardFn<S> backward) {
  auto node = std::make_shared<detail::Node<S>>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  const bool track = grad_enabled() &&
                     std::any_of(parents.begin(), parents.end(),
                                 [](const NodePtr<S>& p) { return p->requires_grad; });
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return TensorT<S>::from_node(std::move(node));
}

/// For every element of `out` (row-major), the offset of the element of `in`
/// it reads under trailing-axis broadcasting.
std::vector<std::size_t> broadcast_offsets(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t axis_in = in.size() - 1 - k;
    const std::size_t axis_out = rank - 1 - k;
    strides[axis_out] = in[axis_in] == 1 ? 0 : stride;
    stride *= in[axis_in];
  }
  const std::size_t n = numel(out);
  std::vector<std::size_t> offsets(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    offsets[i] = offset;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++counter[axis];
      offset += strides[axis];
      if (counter[axis] < out[axis]) break;
      offset -= strides[axis] * counter[axis];
      counter[axis] = 0;
    }
  }
  return offsets;
}

template <typename S, typename Forward, typename DA, typename DB>
TensorT<S> binary(const TensorT<S>& a, const TensorT<S>& b, const char* op, Forward f, DA da, DB db) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const std::size_t n = numel(out_shape);
  std::vector<S> out(n);
  const auto av = a.values();
  const auto bv = b.values();
  const bool same = a.shape() == b.shape();
  auto oa = std::make_shared<std::vector<std::size_t>>();
  auto ob = std::make_shared<std::vector<std::size_t>>();
  if (same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  } else {
    *oa = broadcast_offsets(a.shape(), out_shape);
    *ob = broadcast_offsets(b.shape(), out_shape);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[(*oa)[i]], bv[(*ob)[i]]);
  }
  return make_result<S>(
      std::move(out_shape), std::move(out), op, {a.node(), b.node()},
      [same, oa, ob, da, db](detail::Node<S>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const std::size_t n = self.grad.size();
        auto ia = [&](std::size_t i) { return same ? i : (*oa)[i]; };
        auto ib = [&](std::size_t i) { return same ? i : (*ob)[i]; };
        if (pa.requires_grad) {
          auto& ga = pa.ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            ga[ia(i)] += self.grad[i] * da(pa.values[ia(i)], pb.values[ib(i)]);
        }
        if (pb.requires_grad) {
          auto& gb = pb.ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            gb[ib(i)] += self.grad[i] * db(pa.values[ia(i)], pb.values[ib(i)]);
        }
      });
}

/// Elementwise map whose derivative is expressed through input x and output y.
template <typename S, typename Forward, typename Deriv>
TensorT<S> unary(const TensorT<S>& x, const char* op, Forward f, Deriv d) {
  const auto xv = x.values();
  std::vector<S> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_result<S>(x.shape(), std::move(out), op, {x.node()}, [d](detail::Node<S>& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * d(p.values[i], self.values[i]);
  });
}

template <typename S>
TensorT<S> reduce(const TensorT<S>& x, const std::vector<std::size_t>& axes, bool keep_dims, bool average) {
  const std::size_t rank = x.rank();
  std::vector<bool> reduced(rank, axes.empty());
  for (auto axis : axes) {
    if (axis >= rank) {
      throw DimensionError("reduce: axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
    }
    if (reduced[axis]) throw DimensionError("reduce: duplicate axis " + std::to_string(axis));
    reduced[axis] = true;
  }
  Shape kept(rank);
  Shape squeezed;
  std::size_t count = 1;
  for (std::size_t axis = 0; axis < rank; ++axis) {
    kept[axis] = reduced[axis] ? 1 : x.shape()[axis];
    if (reduced[axis]) {
      count *= x.shape()[axis];
    } else {
      squeezed.push_back(x.shape()[axis]);
    }
  }
  if (count == 0) throw DimensionError("reduce: empty reduction over " + to_string(x.shape()));
  const S scale = average ? S(1) / static_cast<S>(count) : S(1);
  auto offsets = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(kept, x.shape()));
  std::vector<S> out(numel(kept), S(0));
  const auto xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) out[(*offsets)[i]] += xv[i];
  if (average) {
    for (auto& v : out) v *= scale;
  }
  return make_result<S>(keep_dims ? kept : squeezed, std::move(out), average ? "mean" : "sum", {x.node()},
                        [offsets, scale](detail::Node<S>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[(*offsets)[i]] * scale;
                        });
}

template <typename S>
void check_tau(S tau, const char* op) {
  if (!(tau > S(0))) throw ParameterError(std::string(op) + ": temperature must be positive");
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t ea = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t eb = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("broadcast: incompatible shapes " + to_string(a) + " and " + to_string(b));
    }
    out[rank - 1 - k] = ea == 1 ? eb : ea;
  }
  return out;
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  return binary(a, b, "add", [](S x, S y) { return x + y; }, [](S, S) { return S(1); }, [](S, S) { return S(1); });
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  return binary(a, b, "sub", [](S x, S y) { return x - y; }, [](S, S) { return S(1); }, [](S, S) { return S(-1); });
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  return binary(a, b, "mul", [](S x, S y) { return x * y; }, [](S, S y) { return y; }, [](S x, S) { return x; });
}

template <typename S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
  return binary(
      a, b, "div", [](S x, S y) { return x / y; }, [](S, S y) { return S(1) / y; },
      [](S x, S y) { return -x / (y * y); });
}

template <typename S>
TensorT<S> add_scalar(const TensorT<S>& x, ScalarArg<S> c) {
  return unary(x, "add_scalar", [c](S v) { return v + c; }, [](S, S) { return S(1); });
}

template <typename S>
TensorT<S> mul_scalar(const TensorT<S>& x, ScalarArg<S> c) {
  return unary(x, "mul_scalar", [c](S v) { return v * c; }, [c](S, S) { return c; });
}

template <typename S>
TensorT<S> neg(const TensorT<S>& x) {
  return unary(x, "neg", [](S v) { return -v; }, [](S, S) { return S(-1); });
}

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
  return unary(
      x, "relu", [](S v) { return v > S(0) || v != v ? v : S(0); }, [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
TensorT<S> exp(const TensorT<S>& x) {
  return unary(x, "exp", [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <typename S>
TensorT<S> log(const TensorT<S>& x) {
  return unary(x, "log", [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; });
}

template <typename S>
TensorT<S> sqrt(const TensorT<S>& x) {
  return unary(x, "sqrt", [](S v) { return std::sqrt(v); }, [](S, S y) { return S(0.5) / y; });
}

template <typename S>
TensorT<S> square(const TensorT<S>& x) {
  return unary(x, "square", [](S v) { return v * v; }, [](S v, S) { return S(2) * v; });
}

template <typename S>
TensorT<S> sum(const TensorT<S>& x, const std::vector<std::size_t>& axes, bool keep_dims) {
  return reduce(x, axes, keep_dims, false);
}

template <typename S>
TensorT<S> mean(const TensorT<S>& x, const std::vector<std::size_t>& axes, bool keep_dims) {
  return reduce(x, axes, keep_dims, true);
}

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<S> out(x.values().begin(), x.values().end());
  return make_result<S>(std::move(shape), std::move(out), "reshape", {x.node()}, [](detail::Node<S>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename S>
TensorT<S> concat(std::span<const TensorT<S>> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t k = 0; ok && k < s.size(); ++k) ok = k == axis || s[k] == first[k];
    if (!ok) throw DimensionError("concat: shape " + to_string(s) + " does not match " + to_string(first));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= first[k];
  std::size_t inner = 1;
  for (std::size_t k = axis + 1; k < first.size(); ++k) inner *= first[k];

  std::vector<std::size_t> widths;
  std::vector<NodePtr<S>> parents;
  for (const auto& p : parts) {
    widths.push_back(p.shape()[axis] * inner);
    parents.push_back(p.node());
  }
  const std::size_t row = out_shape[axis] * inner;
  std::vector<S> out(numel(out_shape));
  std::size_t start = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto v = parts[k].values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.begin() + o * widths[k], widths[k], out.begin() + o * row + start);
    start += widths[k];
  }
  return make_result<S>(std::move(out_shape), std::move(out), "concat", std::move(parents),
                        [widths, outer, row](detail::Node<S>& self) {
                          std::size_t start = 0;
                          for (std::size_t k = 0; k < self.parents.size(); ++k) {
                            auto& p = *self.parents[k];
                            if (p.requires_grad) {
                              auto& g = p.ensure_grad();
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t i = 0; i < widths[k]; ++i)
                                  g[o * widths[k] + i] += self.grad[o * row + start + i];
                            }
                            start += widths[k];
                          }
                        });
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& x) {
  using Matrix = typename TensorT<S>::RowMatrix;
  const auto m = x.matrix();
  std::vector<S> out(x.numel());
  Eigen::Map<Matrix>(out.data(), m.cols(), m.rows()) = m.transpose();
  return make_result<S>(Shape{x.shape()[1], x.shape()[0]}, std::move(out), "transpose", {x.node()},
                        [](detail::Node<S>& self) {
                          auto& p = *self.parents[0];
                          auto& g = p.ensure_grad();
                          const auto rows = static_cast<Eigen::Index>(p.shape[0]);
                          const auto cols = static_cast<Eigen::Index>(p.shape[1]);
                          Eigen::Map<Matrix>(g.data(), rows, cols) +=
                              Eigen::Map<const Matrix>(self.grad.data(), cols, rows).transpose();
                        });
}

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  using Matrix = typename TensorT<S>::RowMatrix;
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.shape()[0]);
  const auto k = static_cast<Eigen::Index>(a.shape()[1]);
  const auto n = static_cast<Eigen::Index>(b.shape()[1]);
  std::vector<S> out(static_cast<std::size_t>(m * n));
  Eigen::Map<Matrix>(out.data(), m, n).noalias() = a.matrix() * b.matrix();
  return make_result<S>(Shape{a.shape()[0], b.shape()[1]}, std::move(out), "matmul", {a.node(), b.node()},
                        [m, k, n](detail::Node<S>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          Eigen::Map<const Matrix> g(self.grad.data(), m, n);
                          Eigen::Map<const Matrix> av(pa.values.data(), m, k);
                          Eigen::Map<const Matrix> bv(pb.values.data(), k, n);
                          if (pa.requires_grad) {
                            Eigen::Map<Matrix>(pa.ensure_grad().data(), m, k).noalias() += g * bv.transpose();
                          }
                          if (pb.requires_grad) {
                            Eigen::Map<Matrix>(pb.ensure_grad().data(), k, n).noalias() += av.transpose() * g;
                          }
                        });
}

template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& weight, const std::optional<TensorT<S>>& bias) {
  using Matrix = typename TensorT<S>::RowMatrix;
  if (x.rank() != 2 || weight.rank() != 2 || x.shape()[1] != weight.shape()[1]) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(weight.shape()));
  }
  const auto rows = static_cast<Eigen::Index>(x.shape()[0]);
  const auto in = static_cast<Eigen::Index>(x.shape()[1]);
  const auto out_features = static_cast<Eigen::Index>(weight.shape()[0]);
  if (bias && (bias->rank() != 1 || bias->shape()[0] != weight.shape()[0])) {
    throw DimensionError("linear: bias " + to_string(bias->shape()) + " incompatible with weight " +
                         to_string(weight.shape()));
  }
  std::vector<S> out(static_cast<std::size_t>(rows * out_features));
  Eigen::Map<Matrix> y(out.data(), rows, out_features);
  // Row-at-a-time so a sample's logits do not depend on its batch position.
  const auto xm = x.matrix();
  const auto wm = weight.matrix();
  for (Eigen::Index r = 0; r < rows; ++r) y.row(r).noalias() = xm.row(r) * wm.transpose();
  std::vector<NodePtr<S>> parents{x.node(), weight.node()};
  if (bias) {
    Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> b(bias->values().data(), out_features);
    y.rowwise() += b;
    parents.push_back(bias->node());
  }
  return make_result<S>(Shape{x.shape()[0], weight.shape()[0]}, std::move(out), "linear", std::move(parents),
                        [rows, in, out_features](detail::Node<S>& self) {
                          auto& px = *self.parents[0];
                          auto& pw = *self.parents[1];
                          Eigen::Map<const Matrix> g(self.grad.data(), rows, out_features);
                          if (px.requires_grad) {
                            Eigen::Map<const Matrix> w(pw.values.data(), out_features, in);
                            Eigen::Map<Matrix>(px.ensure_grad().data(), rows, in).noalias() += g * w;
                          }
                          if (pw.requires_grad) {
                            Eigen::Map<const Matrix> xv(px.values.data(), rows, in);
                            Eigen::Map<Matrix>(pw.ensure_grad().data(), out_features, in).noalias() +=
                                g.transpose() * xv;
                          }
                          if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                            Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(self.parents[2]->ensure_grad().data(),
                                                                            out_features) += g.colwise().sum();
                          }
                        });
}

template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& kernel, std::size_t stride, std::size_t pad) {
  using Matrix = typename TensorT<S>::RowMatrix;
  if (x.rank() != 4 || kernel.rank() != 4 || x.shape()[1] != kernel.shape()[1]) {
    throw DimensionError("conv2d: input " + to_string(x.shape()) + " incompatible with kernel " +
                         to_string(kernel.shape()));
  }
  if (stride == 0) throw ParameterError("conv2d: stride must be positive");
  const std::size_t batch = x.shape()[0], channels = x.shape()[1], height = x.shape()[2], width = x.shape()[3];
  const std::size_t outc = kernel.shape()[0], kh = kernel.shape()[2], kw = kernel.shape()[3];
  if (kh > height + 2 * pad || kw > width + 2 * pad) {
    throw DimensionError("conv2d: kernel " + to_string(kernel.shape()) + " larger than padded input " +
                         to_string(x.shape()));
  }
  if ((height + 2 * pad - kh) % stride != 0 || (width + 2 * pad - kw) % stride != 0) {
    throw DimensionError("conv2d: non-integral output extent for input " + to_string(x.shape()) + ", kernel " +
                         to_string(kernel.shape()) + ", stride " + std::to_string(stride) + ", pad " +
                         std::to_string(pad));
  }
  const std::size_t oh = (height + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (width + 2 * pad - kw) / stride + 1;
  const std::size_t plane = oh * ow;
  const std::size_t patch = channels * kh * kw;

  // One patch matrix [patch × plane] per sample, row = (c, i, j), column =
  // (oy, ox). Per-sample GEMMs keep each sample's arithmetic independent of
  // its position in the batch.
  const std::size_t sample_cols = patch * plane;
  auto cols = std::make_shared<std::vector<S>>(batch * sample_cols, S(0));
  const auto xv = x.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const S* src = xv.data() + (b * channels + c) * height * width;
      for (std::size_t i = 0; i < kh; ++i)
        for (std::size_t j = 0; j < kw; ++j) {
          S* row = cols->data() + b * sample_cols + ((c * kh + i) * kw + j) * plane;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + j) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
              row[oy * ow + ox] = src[iy * static_cast<std::ptrdiff_t>(width) + ix];
            }
          }
        }
    }

  const auto P = static_cast<Eigen::Index>(patch);
  const auto Q = static_cast<Eigen::Index>(plane);
  const auto O = static_cast<Eigen::Index>(outc);
  std::vector<S> out(batch * outc * plane);
  Eigen::Map<const Matrix> kmat(kernel.values().data(), O, P);
  for (std::size_t b = 0; b < batch; ++b) {
    Eigen::Map<Matrix>(out.data() + b * outc * plane, O, Q).noalias() =
        kmat * Eigen::Map<const Matrix>(cols->data() + b * sample_cols, P, Q);
  }

  return make_result<S>(
      Shape{batch, outc, oh, ow}, std::move(out), "conv2d", {x.node(), kernel.node()},
      [=](detail::Node<S>& self) {
        auto& px = *self.parents[0];
        auto& pk = *self.parents[1];
        if (pk.requires_grad) {
          Eigen::Map<Matrix> gk(pk.ensure_grad().data(), O, P);
          for (std::size_t b = 0; b < batch; ++b) {
            gk.noalias() += Eigen::Map<const Matrix>(self.grad.data() + b * outc * plane, O, Q) *
                            Eigen::Map<const Matrix>(cols->data() + b * sample_cols, P, Q).transpose();
          }
        }
        if (px.requires_grad) {
          Eigen::Map<const Matrix> kv(pk.values.data(), O, P);
          auto& gx = px.ensure_grad();
          Matrix dcols(P, Q);
          for (std::size_t b = 0; b < batch; ++b) {
            dcols.noalias() = kv.transpose() * Eigen::Map<const Matrix>(self.grad.data() + b * outc * plane, O, Q);
            for (std::size_t c = 0; c < channels; ++c) {
              S* dst = gx.data() + (b * channels + c) * height * width;
              for (std::size_t i = 0; i < kh; ++i)
                for (std::size_t j = 0; j < kw; ++j) {
                  const S* row = dcols.data() + ((c * kh + i) * kw + j) * plane;
                  for (std::size_t oy = 0; oy < oh; ++oy) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                      const std::ptrdiff_t ix =
                          static_cast<std::ptrdiff_t>(ox * stride + j) - static_cast<std::ptrdiff_t>(pad);
                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
                      dst[iy * static_cast<std::ptrdiff_t>(width) + ix] += row[oy * ow + ox];
                    }
                  }
                }
            }
          }
        }
      });
}

template <typename S>
TensorT<S> gap(const TensorT<S>& x) {
  if (x.rank() != 4) throw DimensionError("gap: expected B×C×H×W, got " + to_string(x.shape()));
  const std::size_t rows = x.shape()[0] * x.shape()[1];
  const std::size_t plane = x.shape()[2] * x.shape()[3];
  if (plane == 0) throw DimensionError("gap: empty spatial extent in " + to_string(x.shape()));
  const S scale = S(1) / static_cast<S>(plane);
  std::vector<S> out(rows);
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    S acc = 0;
    for (std::size_t p = 0; p < plane; ++p) acc += xv[r * plane + p];
    out[r] = acc * scale;
  }
  return make_result<S>(Shape{x.shape()[0], x.shape()[1]}, std::move(out), "gap", {x.node()},
                        [rows, plane, scale](detail::Node<S>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t p = 0; p < plane; ++p) g[r * plane + p] += self.grad[r] * scale;
                        });
}

template <typename S>
TensorT<S> batch_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta, ScalarArg<S> eps,
                      std::vector<S>* batch_mean, std::vector<S>* batch_var) {
  if (x.rank() != 4 && x.rank() != 2) throw DimensionError("batch_norm: expected rank 2 or 4, got " + to_string(x.shape()));
  const std::size_t batch = x.shape()[0];
  const std::size_t channels = x.shape()[1];
  const std::size_t plane = x.rank() == 4 ? x.shape()[2] * x.shape()[3] : 1;
  if (gamma.numel() != channels || beta.numel() != channels) {
    throw DimensionError("batch_norm: affine parameters do not match " + std::to_string(channels) + " channels");
  }
  const std::size_t count = batch * plane;
  if (count == 0) throw DimensionError("batch_norm: empty batch");
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  auto normalized = std::make_shared<std::vector<S>>(x.numel());
  auto inv_std = std::make_shared<std::vector<S>>(channels);
  if (batch_mean) batch_mean->assign(channels, S(0));
  if (batch_var) batch_var->assign(channels, S(0));
  std::vector<S> out(x.numel());
  for (std::size_t c = 0; c < channels; ++c) {
    S m = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t p = 0; p < plane; ++p) m += xv[(b * channels + c) * plane + p];
    m /= static_cast<S>(count);
    S v = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t p = 0; p < plane; ++p) {
        const S d = xv[(b * channels + c) * plane + p] - m;
        v += d * d;
      }
    v /= static_cast<S>(count);
    const S is = S(1) / std::sqrt(v + eps);
    (*inv_std)[c] = is;
    if (batch_mean) (*batch_mean)[c] = m;
    if (batch_var) (*batch_var)[c] = v;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t idx = (b * channels + c) * plane + p;
        (*normalized)[idx] = (xv[idx] - m) * is;
        out[idx] = gv[c] * (*normalized)[idx] + bv[c];
      }
  }
  return make_result<S>(
      x.shape(), std::move(out), "batch_norm", {x.node(), gamma.node(), beta.node()},
      [=](detail::Node<S>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& g = self.grad;
        for (std::size_t c = 0; c < channels; ++c) {
          S sum_g = 0, sum_gx = 0;
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t idx = (b * channels + c) * plane + p;
              sum_g += g[idx];
              sum_gx += g[idx] * (*normalized)[idx];
            }
          if (pb.requires_grad) pb.ensure_grad()[c] += sum_g;
          if (pg.requires_grad) pg.ensure_grad()[c] += sum_gx;
          if (px.requires_grad) {
            auto& gx = px.ensure_grad();
            const S scale = pg.values[c] * (*inv_std)[c] / static_cast<S>(count);
            for (std::size_t b = 0; b < batch; ++b)
              for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t idx = (b * channels + c) * plane + p;
                gx[idx] += scale * (static_cast<S>(count) * g[idx] - sum_g - (*normalized)[idx] * sum_gx);
              }
          }
        }
      });
}

template <typename S>
TensorT<S> softmax(const TensorT<S>& z, ScalarArg<S> tau) {
  check_tau<S>(tau, "softmax");
  if (z.rank() == 0) throw DimensionError("softmax: needs at least one axis");
  const std::size_t width = z.shape().back();
  const std::size_t rows = width ? z.numel() / width : 0;
  const auto zv = z.values();
  std::vector<S> out(z.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const S* in = zv.data() + r * width;
    S* y = out.data() + r * width;
    const S top = *std::max_element(in, in + width);
    S total = 0;
    for (std::size_t c = 0; c < width; ++c) total += (y[c] = std::exp((in[c] - top) / tau));
    for (std::size_t c = 0; c < width; ++c) y[c] /= total;
  }
  return make_result<S>(z.shape(), std::move(out), "softmax", {z.node()}, [rows, width, tau](detail::Node<S>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const S* y = self.values.data() + r * width;
      const S* gy = self.grad.data() + r * width;
      S dot = 0;
      for (std::size_t c = 0; c < width; ++c) dot += gy[c] * y[c];
      for (std::size_t c = 0; c < width; ++c) g[r * width + c] += y[c] * (gy[c] - dot) / tau;
    }
  });
}

template <typename S>
TensorT<S> log_softmax(const TensorT<S>& z, ScalarArg<S> tau) {
  check_tau<S>(tau, "log_softmax");
  if (z.rank() == 0) throw DimensionError("log_softmax: needs at least one axis");
  const std::size_t width = z.shape().back();
  const std::size_t rows = width ? z.numel() / width : 0;
  const auto zv = z.values();
  std::vector<S> out(z.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const S* in = zv.data() + r * width;
    S* y = out.data() + r * width;
    const S top = *std::max_element(in, in + width);
    S total = 0;
    for (std::size_t c = 0; c < width; ++c) total += std::exp((in[c] - top) / tau);
    const S log_total = std::log(total);
    for (std::size_t c = 0; c < width; ++c) y[c] = (in[c] - top) / tau - log_total;
  }
  return make_result<S>(z.shape(), std::move(out), "log_softmax", {z.node()},
                        [rows, width, tau](detail::Node<S>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const S* y = self.values.data() + r * width;
                            const S* gy = self.grad.data() + r * width;
                            S total = 0;
                            for (std::size_t c = 0; c < width; ++c) total += gy[c];
                            for (std::size_t c = 0; c < width; ++c)
                              g[r * width + c] += (gy[c] - std::exp(y[c]) * total) / tau;
                          }
                        });
}

#define ADMKD_INSTANTIATE_OPS(S)                                                                          \
  template TensorT<S> add(const TensorT<S>&, const TensorT<S>&);                                          \
  template TensorT<S> sub(const TensorT<S>&, const TensorT<S>&);                                          \
  template TensorT<S> mul(const TensorT<S>&, const TensorT<S>&);                                          \
  template TensorT<S> div(const TensorT<S>&, const TensorT<S>&);                                          \
  template TensorT<S> add_scalar(const TensorT<S>&, ScalarArg<S>);                                        \
  template TensorT<S> mul_scalar(const TensorT<S>&, ScalarArg<S>);                                        \
  template TensorT<S> neg(const TensorT<S>&);                                                             \
  template TensorT<S> relu(const TensorT<S>&);                                                            \
  template TensorT<S> exp(const TensorT<S>&);                                                             \
  template TensorT<S> log(const TensorT<S>&);                                                             \
  template TensorT<S> sqrt(const TensorT<S>&);                                                            \
  template TensorT<S> square(const TensorT<S>&);                                                          \
  template TensorT<S> sum(const TensorT<S>&, const std::vector<std::size_t>&, bool);                      \
  template TensorT<S> mean(const TensorT<S>&, const std::vector<std::size_t>&, bool);                     \
  template TensorT<S> reshape(const TensorT<S>&, Shape);                                                  \
  template TensorT<S> concat(std::span<const TensorT<S>>, std::size_t);                                   \
  template TensorT<S> transpose(const TensorT<S>&);                                                       \
  template TensorT<S> matmul(const TensorT<S>&, const TensorT<S>&);                                       \
  template TensorT<S> linear(const TensorT<S>&, const TensorT<S>&, const std::optional<TensorT<S>>&);     \
  template TensorT<S> conv2d(const TensorT<S>&, const TensorT<S>&, std::size_t, std::size_t);             \
  template TensorT<S> gap(const TensorT<S>&);                                                             \
  template TensorT<S> batch_norm(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&, ScalarArg<S>,   \
                                 std::vector<S>*, std::vector<S>*);                                       \
  template TensorT<S> softmax(const TensorT<S>&, ScalarArg<S>);                                           \
  template TensorT<S> log_softmax(const TensorT<S>&, ScalarArg<S>);

ADMKD_INSTANTIATE_OPS(float)
ADMKD_INSTANTIATE_OPS(double)

}  // namespace admkd
