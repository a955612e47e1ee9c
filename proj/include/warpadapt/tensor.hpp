#pragma once

// Rank-4 tensors with a reverse-mode differentiation graph.
//
// A Tensor is a cheap shared handle to a Node. Kernels (kernels.hpp) create
// new nodes that remember their inputs and a backward rule; backward() walks
// the graph from a scalar loss in reverse topological order.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace warpadapt {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// (batch, channel, height, width)
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t numel() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  constexpr std::size_t operator[](int axis) const {
    switch (axis) {
      case 0: return n;
      case 1: return c;
      case 2: return h;
      default: return w;
    }
  }
  constexpr std::array<std::size_t, 4> dims() const { return {n, c, h, w}; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) + "," +
         std::to_string(s.w) + ")";
}

inline constexpr Shape kScalarShape{1, 1, 1, 1};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
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

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty means "absent"
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor make(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != shape.numel()) {
      throw ShapeError("make_tensor: " + std::to_string(values.size()) + " values for shape " +
                       to_string(shape));
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = shape;
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return make(shape, std::vector<T>(shape.numel(), T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    return make(shape, std::vector<T>(shape.numel(), v), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return full(kScalarShape, v, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->shape.numel(); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  std::vector<T>& mutable_values() { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return !node_->backward; }
  const char* op() const { return node_->op; }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    const Shape& s = node_->shape;
    return ((n * s.c + c) * s.h + y) * s.w + x;
  }
  T at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return node_->value[offset(n, c, y, x)];
  }

  // Leaf copy of the values, cut from the graph.
  Tensor detach() const { return make(shape(), values(), false); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(values().begin(), values().end());
    return Tensor<U>::make(shape(), std::move(out), false);
  }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
Tensor<T> make_tensor(Shape shape, std::vector<T> values, bool requires_grad = false) {
  return Tensor<T>::make(shape, std::move(values), requires_grad);
}

namespace detail {

// Creates the output node of a kernel. The node joins the graph only when
// recording is enabled and some input requires a gradient.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs, const char* op) {
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value = std::move(value);
  node->op = op;
  if (grad_enabled()) {
    bool any = false;
    for (const Tensor<T>* in : inputs) any = any || (in->defined() && in->requires_grad());
    if (any) {
      node->requires_grad = true;
      for (const Tensor<T>* in : inputs) node->inputs.push_back(in->defined() ? in->node_ptr() : nullptr);
    }
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> make_result_list(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                           const char* op) {
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value = std::move(value);
  node->op = op;
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    }
  }
  return Tensor<T>(std::move(node));
}

// Gradient buffer of input i, or nullptr when that input does not need one.
template <class T>
std::vector<T>* input_grad(Node<T>& self, std::size_t i) {
  auto& in = self.inputs[i];
  if (!in || !in->requires_grad) return nullptr;
  return &in->grad_buffer();
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Gradients accumulate into leaves;
// intermediate gradients are released once propagated.
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.shape() != kScalarShape) {
    throw UsageError("backward: loss must be a scalar of shape (1,1,1,1), got " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) throw UsageError("backward: loss does not depend on any trainable tensor");

  // Iterative post-order DFS; input order fixes the traversal order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Node<T>* root = loss.node();
  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->backward) continue;
    if (node->grad.empty()) continue;
    node->backward(*node);
    if (node != root) std::vector<T>().swap(node->grad);
  }
}

}  // namespace warpadapt
