#include "nnm/tensor.hpp"

#include <algorithm>
#include <utility>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace nnm {

std::size_t shape_numel(const Shape& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::string shape_str(const Shape& dims) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) out << 'x';
    out << dims[i];
  }
  out << ']';
  return out.str();
}

namespace {
thread_local bool g_no_grad = false;

void check_rank(const Shape& dims) {
  if (dims.empty() || dims.size() > 4) {
    throw DimensionError("tensor rank must be 1-4, got " + std::to_string(dims.size()));
  }
}
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::enabled() { return g_no_grad; }

namespace detail {

template <typename T>
std::span<T> Node<T>::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), T(0));
  return grad;
}

template <typename T>
Tensor<T> make_result(const std::string& op, Shape dims, std::vector<T> values,
                      std::vector<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward) {
  check_rank(dims);
  if (shape_numel(dims) != values.size()) {
    throw DimensionError(op + ": value count does not match " + shape_str(dims));
  }
  auto node = std::make_shared<Node<T>>();
  node->dims = std::move(dims);
  node->data = std::move(values);
  node->op = op;
  if (!g_no_grad) {
    bool any = std::any_of(parents.begin(), parents.end(),
                           [](const Tensor<T>& p) { return p.defined() && p.node()->needs_grad(); });
    if (any) {
      for (auto& p : parents) node->parents.push_back(p.node());
      node->backward = std::move(backward);
    }
  }
  return Tensor<T>::from_node(std::move(node));
}

}  // namespace detail

template <typename T>
Tensor<T>::Tensor(Shape dims, T fill) {
  check_rank(dims);
  node_ = std::make_shared<detail::Node<T>>();
  node_->data.assign(shape_numel(dims), fill);
  node_->dims = std::move(dims);
}

template <typename T>
Tensor<T>::Tensor(Shape dims, std::vector<T> values) {
  check_rank(dims);
  if (shape_numel(dims) != values.size()) {
    throw DimensionError("tensor " + shape_str(dims) + " given " + std::to_string(values.size()) +
                         " values");
  }
  node_ = std::make_shared<detail::Node<T>>();
  node_->dims = std::move(dims);
  node_->data = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::from_node(NodePtr node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t i) const {
  if (i >= rank()) throw DimensionError("dim index out of range for " + shape_str(dims()));
  return node_->dims[i];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor " + shape_str(dims()));
  return node_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  if (!node_->is_leaf()) throw ContractError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = flag;
  return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->dims, node_->data);
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss");
  }
  using NodeT = detail::Node<T>;
  auto* root = loss.node().get();
  if (!root->needs_grad()) throw ContractError("loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (!parent->is_leaf() && seen.insert(parent).second) stack.emplace_back(parent, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  for (auto* node : order) node->grad.assign(node->data.size(), T(0));
  if (root->is_leaf()) {
    root->grad_buffer()[0] += T(1);
    return;
  }
  // Leaf gradients of this sweep are built from zero and added to what was
  // there, so repeating a sweep gives exactly k times the gradient.
  std::vector<std::pair<NodeT*, std::vector<T>>> stash;
  for (auto* node : order)
    for (auto& parent : node->parents)
      if (parent->is_leaf() && parent->requires_grad && !parent->grad.empty() &&
          std::none_of(stash.begin(), stash.end(), [&](auto& e) { return e.first == parent.get(); }))
        stash.emplace_back(parent.get(), std::exchange(parent->grad, {}));

  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) (*it)->backward(**it);

  for (auto& [leaf, previous] : stash) {
    auto g = leaf->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += previous[i];
  }
}

bool all_finite(std::span<const float> values) {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& what) {
  if (!all_finite(t.data())) throw NumericalError(what + " contains non-finite values");
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> values(t.data().begin(), t.data().end());
  Tensor<To> out(t.dims(), std::move(values));
  out.set_requires_grad(t.requires_grad());
  return out;
}

template struct detail::Node<float>;
template struct detail::Node<double>;
template class Tensor<float>;
template class Tensor<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);
template void require_finite(const Tensor<float>&, const std::string&);
template void require_finite(const Tensor<double>&, const std::string&);
template Tensor<double> cast(const Tensor<float>&);
template Tensor<float> cast(const Tensor<double>&);
template Tensor<float> detail::make_result(const std::string&, Shape, std::vector<float>,
                                           std::vector<Tensor<float>>,
                                           std::function<void(detail::Node<float>&)>);
template Tensor<double> detail::make_result(const std::string&, Shape, std::vector<double>,
                                            std::vector<Tensor<double>>,
                                            std::function<void(detail::Node<double>&)>);

}  // namespace nnm
