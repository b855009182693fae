#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A BasicTensor is a cheap handle onto a shared graph node. Operations in
// ops.hpp produce new nodes that remember their inputs and a local gradient
// rule; backward() walks the graph once in reverse topological order.

#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "corrfield/error.hpp"

namespace corrfield {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <std::floating_point T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first touched by backward()
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs[i]->grad.
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

template <std::floating_point T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  BasicTensor() : BasicTensor(Shape{}, std::vector<T>{T(0)}) {}

  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    for (std::size_t extent : shape) {
      if (extent == 0) {
        throw ShapeError("tensor extents must be positive, got " +
                         to_string(shape));
      }
    }
    if (numel(shape) != values.size()) {
      throw ShapeError("shape " + to_string(shape) + " needs " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, T(0)),
                       requires_grad);
  }

  static BasicTensor full(Shape shape, T fill, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, fill),
                       requires_grad);
  }

  static BasicTensor scalar(T v, bool requires_grad = false) {
    return BasicTensor(Shape{}, std::vector<T>{v}, requires_grad);
  }

  // Result of an operation. Inputs and the gradient rule are kept only when
  // some input participates in differentiation.
  static BasicTensor make_result(Shape shape, std::vector<T> values,
                                 std::vector<NodePtr> inputs,
                                 std::function<void(detail::Node<T>&)> rule) {
    BasicTensor out(std::move(shape), std::move(values));
    bool tracked = false;
    for (const auto& in : inputs) tracked = tracked || in->requires_grad;
    if (tracked) {
      out.node_->requires_grad = true;
      out.node_->inputs = std::move(inputs);
      out.node_->backward_fn = std::move(rule);
    }
    return out;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }

  std::span<const T> values() const { return node_->value; }
  // Direct write access, meant for leaves (parameters, inputs). Mutating a
  // value that already feeds a recorded graph invalidates that graph.
  std::span<T> mutable_values() { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }

  T item() const {
    if (size() != 1) {
      throw ShapeError("item() needs a single-element tensor, shape is " +
                       to_string(shape()));
    }
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->inputs.empty()) {
      throw std::logic_error("requires_grad can only be toggled on leaves");
    }
    node_->requires_grad = on;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Copy of the values with no graph history.
  BasicTensor detach() const { return BasicTensor(shape(), node_->value); }

  const NodePtr& node() const { return node_; }

  // Populates grad on every requires_grad node reachable from this scalar.
  // Leaf gradients accumulate across calls on different graphs; calling
  // backward twice on the same loss is rejected.
  void backward() const {
    if (size() != 1) {
      throw ShapeError("backward() needs a scalar loss, shape is " +
                       to_string(shape()));
    }
    if (node_->backward_done) {
      throw std::logic_error("backward() already ran on this graph");
    }
    if (!node_->requires_grad) {
      throw std::logic_error("loss does not depend on any requires_grad tensor");
    }
    node_->backward_done = true;

    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node<T>* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    for (auto* node : order) node->ensure_grad();
    // Intermediate grads start from zero for this pass.
    for (auto* node : order) {
      if (node != node_.get() && !node->inputs.empty()) {
        std::fill(node->grad.begin(), node->grad.end(), T(0));
      }
    }
    node_->grad.assign(1, T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node<T>* node = *it;
      if (node->backward_fn) {
        for (auto& in : node->inputs) {
          if (in->requires_grad) in->ensure_grad();
        }
        node->backward_fn(*node);
      }
    }
  }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

}  // namespace corrfield
