#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace riskref::nn {

// Row-major matrix shape. Vectors are 1 x n, scalars 1 x 1.
struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
  std::string str() const { return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]"; }
};

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : std::invalid_argument(op + ": incompatible shapes " + a.str() + " and " + b.str()) {}
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables taping on this thread for the guard's lifetime (inference, validation).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values) {
    if (values.size() != shape.size())
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " + shape.str());
    auto node = std::make_shared<detail::Node>();
    node->shape = shape;
    node->value = std::move(values);
    return Tensor(std::move(node));
  }
  static Tensor zeros(Shape shape) { return constant(shape, std::vector<double>(shape.size(), 0.0)); }
  static Tensor scalar(double v) { return constant({1, 1}, {v}); }
  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return constant({1, n}, std::move(values));
  }
  // Leaf that accumulates gradients.
  static Tensor variable(Shape shape, std::vector<double> values) {
    Tensor t = constant(shape, std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rows() const { return node_->shape.rows; }
  std::size_t cols() const { return node_->shape.cols; }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ShapeError("item: tensor is not a scalar " + shape().str());
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty(); }
  // Empty span until a backward pass reaches this tensor.
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Copy of the values with no tape attached.
  Tensor detach() const { return constant(shape(), node_->value); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Builds an op result. The backward closure is attached only when taping is
// enabled and at least one input tracks gradients.
inline Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                          std::function<void(detail::Node&)> backprop) {
  auto node = std::make_shared<detail::Node>();
  node->shape = shape;
  node->value = std::move(values);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (auto& in : inputs) node->parents.push_back(in.node());
      node->backprop = std::move(backprop);
    }
  }
  return Tensor(std::move(node));
}

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// tracked tensor reachable from the loss.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || !loss.requires_grad())
    throw std::logic_error("backward: loss is not attached to a gradient tape");
  if (loss.size() != 1) throw ShapeError("backward: loss must be a scalar, got " + loss.shape().str());

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backprop && !node->grad.empty()) node->backprop(*node);
  }
}

}  // namespace riskref::nn
