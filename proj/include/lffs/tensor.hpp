#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lffs {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operands of an op have incompatible shapes. The message names
/// the op and both shapes.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs);
  ShapeError(const std::string& op, const std::string& detail);
};

/// Thread-local switch for graph recording. While disabled, ops compute
/// values only and never attach backward closures.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads the node's own grad and accumulates into the parents.
  std::function<void(const std::vector<T>&)> backward;

  void accumulate(std::span<const T> g);
  // Takes the buffer over when nothing has accumulated yet.
  void accumulate(std::vector<T>&& g);
};

/// Dense row-major array taking part in a define-by-run differentiation
/// graph. Copies are shallow handles onto the same node.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T>& values() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; zeros of the tensor's shape when nothing accumulated.
  std::vector<T> grad() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  T item() const;
  T at(std::size_t flat) const { return node_->data.at(flat); }

  /// Leaf copy of the values, cut from the graph.
  Tensor detach() const;
  Tensor clone() const;
  void zero_grad() { node_->grad.clear(); }

  /// Reverse-mode sweep from a scalar. Accumulates into every reachable
  /// tensor that requires grad.
  void backward() const;

  Node<T>* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

/// Builds an op result. The backward closure is kept only when grad mode is
/// on and at least one input requires grad.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
                      std::function<void(const std::vector<T>&)> backward);

template <typename T>
bool any_requires_grad(const std::vector<Tensor<T>>& inputs);

}  // namespace detail

}  // namespace lffs
