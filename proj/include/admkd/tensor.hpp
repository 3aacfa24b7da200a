#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "admkd/errors.hpp"

namespace admkd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

/// One vertex of the reverse-mode graph. Values are dense row-major.
template <typename Scalar>
struct Node {
  Shape shape;
  std::vector<Scalar> values;
  std::vector<Scalar> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  std::vector<Scalar>& ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), Scalar(0));
    return grad;
  }
};

}  // namespace detail

/// Whether newly created op results record a graph on this thread.
bool grad_enabled();

/// Disables graph recording for its lifetime (evaluation, numeric checks).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense n-dimensional array with an optional gradient, participating in a
/// reverse-mode computation graph. Copies are shallow handles to the same node.
template <typename Scalar>
class TensorT {
 public:
  using scalar_type = Scalar;
  using Node = detail::Node<Scalar>;
  using RowMatrix =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;
  using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstArrayMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  /// A rank-0 zero.
  TensorT();
  TensorT(Shape shape, std::vector<Scalar> values, bool requires_grad = false);

  static TensorT zeros(Shape shape);
  static TensorT ones(Shape shape);
  static TensorT full(Shape shape, Scalar value);
  static TensorT scalar(Scalar value);
  static TensorT from_node(std::shared_ptr<Node> node);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t numel() const { return node_->values.size(); }

  std::span<const Scalar> values() const { return node_->values; }
  /// In-place access; only meaningful on leaves (parameters, buffers).
  std::span<Scalar> mutable_values() { return node_->values; }
  ConstArrayMap array() const { return ConstArrayMap(node_->values.data(), numel()); }
  ConstMatrixMap matrix() const;
  Scalar item() const;
  Scalar at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  TensorT& set_requires_grad(bool on);
  bool is_leaf() const { return node_->is_leaf(); }
  const char* op_name() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; empty span when nothing has been accumulated.
  std::span<const Scalar> grad() const { return node_->grad; }
  std::span<Scalar> mutable_grad() { return node_->ensure_grad(); }
  /// Gradient as a detached tensor; zeros when absent.
  TensorT grad_tensor() const;
  void zero_grad();

  /// Accumulates d(this)/d(t) into every reachable tensor t that requires
  /// grad. Leaves keep accumulating across calls until zero_grad().
  void backward() const;

  /// Same values, no parents, requires_grad false.
  TensorT detach() const;
  /// Deep copy as a fresh leaf carrying the same requires_grad flag.
  TensorT clone() const;
  template <typename Other>
  TensorT<Other> cast() const {
    std::vector<Other> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Other>(node_->values[i]);
    return TensorT<Other>(shape(), std::move(out));
  }

  bool same_node(const TensorT& other) const { return node_ == other.node_; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit TensorT(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

extern template class TensorT<float>;
extern template class TensorT<double>;

}  // namespace admkd
