#include "admkd/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace admkd {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename Scalar>
TensorT<Scalar>::TensorT() : node_(std::make_shared<Node>()) {
  node_->values.assign(1, Scalar(0));
}

template <typename Scalar>
TensorT<Scalar>::TensorT(Shape shape, std::vector<Scalar> values, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  if (admkd::numel(shape) != values.size()) {
    throw DimensionError("tensor: shape " + to_string(shape) + " needs " +
                         std::to_string(admkd::numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
TensorT<Scalar> TensorT<Scalar>::zeros(Shape shape) {
  return full(std::move(shape), Scalar(0));
}

template <typename Scalar>
TensorT<Scalar> TensorT<Scalar>::ones(Shape shape) {
  return full(std::move(shape), Scalar(1));
}

template <typename Scalar>
TensorT<Scalar> TensorT<Scalar>::full(Shape shape, Scalar value) {
  const auto n = admkd::numel(shape);
  return TensorT(std::move(shape), std::vector<Scalar>(n, value));
}

template <typename Scalar>
TensorT<Scalar> TensorT<Scalar>::scalar(Scalar value) {
  return TensorT(Shape{}, std::vector<Scalar>{value});
}

template <typename Scalar>
TensorT<Scalar> TensorT<Scalar>::from_node(std::shared_ptr<Node> node) {
  return TensorT(std::move(node));
}

template <typename Scalar>
std::size_t TensorT<Scalar>::extent(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(shape()));
  }
  return shape()[axis];
}

template <typename Scalar>
typename TensorT<Scalar>::ConstMatrixMap TensorT<Scalar>::matrix() const {
  if (rank() != 2) throw DimensionError("tensor: matrix view needs rank 2, got " + to_string(shape()));
  return ConstMatrixMap(node_->values.data(), static_cast<Eigen::Index>(shape()[0]),
                        static_cast<Eigen::Index>(shape()[1]));
}

template <typename Scalar>
Scalar TensorT<Scalar>::item() const {
  if (numel() != 1) throw DimensionError("tensor: item() on shape " + to_string(shape()));
  return node_->values[0];
}

template <typename Scalar>
Scalar TensorT<Scalar>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("tensor: index rank mismatch for " + to_string(shape()));
  std::size_t offset = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape()[axis]) throw DimensionError("tensor: index out of range for " + to_string(shape()));
    offset = offset * shape()[axis] + i;
    ++axis;
  }
  return node_->values[offset];
}

template <typename Scalar>
TensorT<Scalar>& TensorT<Scalar>::set_requires_grad(bool on) {
  if (!is_leaf()) throw ContractError("tensor: requires_grad can only be set on leaves");
  node_->requires_grad = on;
  return *this;
}

template <typename Scalar>
TensorT<Scalar> TensorT<Scalar>::grad_tensor() const {
  if (!has_grad()) return zeros(shape());
  return TensorT(shape(), node_->grad);
}

template <typename Scalar>
void TensorT<Scalar>::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), Scalar(0));
}

template <typename Scalar>
void TensorT<Scalar>::backward() const {
  if (numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + to_string(shape()));
  }
  if (!requires_grad()) throw ContractError("backward: loss is not tracked");

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are per-pass; only leaves accumulate across calls.
  for (Node* node : order) {
    if (!node->is_leaf()) node->grad.assign(node->values.size(), Scalar(0));
  }
  node_->ensure_grad()[0] += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward(**it);
  }
}

template <typename Scalar>
TensorT<Scalar> TensorT<Scalar>::detach() const {
  return TensorT(shape(), node_->values);
}

template <typename Scalar>
TensorT<Scalar> TensorT<Scalar>::clone() const {
  return TensorT(shape(), node_->values, requires_grad());
}

template class TensorT<float>;
template class TensorT<double>;

}  // namespace admkd
