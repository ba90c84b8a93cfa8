#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "stridesense/errors.hpp"

namespace stridesense::nn {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeMismatch(std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
  }
}

// One vertex of the reverse-mode graph. `backward_fn` reads this node's grad
// and accumulates into the parents' grads; saved forward state is captured
// inside the closure.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated on first use
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::int64_t numel() const { return shape_numel(shape); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

template <class T>
void debug_check_finite(const std::vector<T>& values, const char* what) {
#ifndef NDEBUG
  for (const T& v : values) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw Error("NonFiniteValue", std::string(what) + " produced a non-finite value");
    }
  }
#else
  (void)values;
  (void)what;
#endif
}

// Value-semantics handle onto a graph node. Copies share the node.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    auto node = std::make_shared<Node<T>>();
    node->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
      throw ShapeMismatch("from_data: " + shape_str(shape) + " does not hold " +
                          std::to_string(data.size()) + " values");
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(T value) { return from_data({1}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->numel(); }
  std::vector<T>& data() { return node_->data; }
  const std::vector<T>& data() const { return node_->data; }
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  T value() const {
    if (numel() != 1) throw NonScalarLoss("value() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
  }

  // Reverse pass from a scalar. Interior buffers are released as soon as
  // their node has propagated, which bounds peak memory during training.
  void backward() {
    if (numel() != 1) {
      throw NonScalarLoss("backward() requires a scalar, got " + shape_str(shape()));
    }
    Node<T>* root = node_.get();
    if (!root->requires_grad) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    struct Frame {
      Node<T>* node;
      std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    visited.insert(root);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.node->parents.size()) {
        Node<T>* p = f.node->parents[f.next++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }

    root->ensure_grad();
    root->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn) {
        n->ensure_grad();
        n->backward_fn(*n);
      }
      if (!n->is_leaf) {
        std::vector<T>().swap(n->data);
        std::vector<T>().swap(n->grad);
        n->backward_fn = nullptr;  // releases captured forward state
      }
    }
  }

  std::shared_ptr<Node<T>>& node() { return node_; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds an interior node wired to its parents; requires_grad propagates.
template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> data,
                  std::vector<std::shared_ptr<Node<T>>> parents,
                  std::function<void(Node<T>&)> backward_fn, const char* what) {
  debug_check_finite(data, what);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->is_leaf = false;
  bool needs_grad = false;
  for (const auto& p : parents) needs_grad = needs_grad || p->requires_grad;
  node->requires_grad = needs_grad;
  if (needs_grad) {
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

// Adds into a parent's grad buffer only when that parent participates in the
// backward pass.
template <class T>
bool wants_grad(const std::shared_ptr<Node<T>>& node) {
  return node->requires_grad;
}

}  // namespace stridesense::nn
