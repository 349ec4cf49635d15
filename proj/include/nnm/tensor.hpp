#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nnm/errors.hpp"

namespace nnm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& dims);
std::string shape_str(const Shape& dims);

namespace detail {

// One vertex of the autodiff graph. A node owns its values, its gradient
// buffer and, for op outputs, the closure that pushes its gradient into the
// parents. Parents are kept alive by the child, so the graph lives exactly as
// long as the tensors that reference it.
template <typename T>
struct Node {
  Shape dims;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  bool needs_grad() const { return requires_grad || !is_leaf(); }
  // Zero-filled gradient buffer, allocated on first use.
  std::span<T> grad_buffer();
};

}  // namespace detail

// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool enabled();

 private:
  bool previous_;
};

/// Dense row-major tensor of rank 1-4 with an optional gradient.
///
/// A Tensor is a cheap handle: copies share the same storage and graph node.
/// Use clone() or detach() for an independent value.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(Shape dims, T fill = T(0));
  Tensor(Shape dims, std::vector<T> values);

  static Tensor from_node(NodePtr node);

  bool defined() const { return node_ != nullptr; }
  const Shape& dims() const { return node_->dims; }
  std::size_t rank() const { return node_->dims.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }
  // Value of a single-element tensor.
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();

  // Copy of the values with no graph history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::string& op_name() const { return node_->op; }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
/// intermediate gradients are recomputed from zero on every call.
template <typename T>
void backward(const Tensor<T>& loss);

bool all_finite(std::span<const float> values);
bool all_finite(std::span<const double> values);

// Throws NumericalError naming `what` when any value is NaN or infinite.
template <typename T>
void require_finite(const Tensor<T>& t, const std::string& what);

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t);

namespace detail {

// Builds an op output. When recording is on and any parent needs a gradient,
// the node is wired into the graph with `backward`; otherwise it is a
// constant.
template <typename T>
Tensor<T> make_result(const std::string& op, Shape dims, std::vector<T> values,
                      std::vector<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace nnm
