#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "siamattn/tensor.hpp"

namespace siamattn {

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs that require it.
  std::function<void(Node&)> backward;

  Tensor<T>& ensure_grad() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }

  // Gradient buffer of input `i`, or nullptr when that input is a constant.
  Tensor<T>* input_grad(std::size_t i) {
    auto& in = inputs[i];
    return in && in->requires_grad ? &in->ensure_grad() : nullptr;
  }
};

// Handle to a value in the dynamic computation graph.
template <typename T>
class Var {
 public:
  Var() = default;

  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_->grad.shape() == node_->value.shape(); }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad = Tensor<T>(); }
  T item() const { return node_->value.item(); }

  // A new leaf sharing no history with this variable.
  Var detach() const { return Var(node_->value, false); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds the result of an operation. History is recorded only when grad mode
// is on and at least one input requires a gradient.
template <typename T, typename Backward>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, Backward&& backward) {
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::forward<Backward>(backward);
  }
  return Var<T>(std::move(node));
}

// Reverse-mode sweep from `root`, seeded with `seed` (ones when omitted).
template <typename T>
void backward(const Var<T>& root, const Tensor<T>* seed = nullptr) {
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Node<T>* r = root.node().get();
  Tensor<T>& g = r->ensure_grad();
  if (seed) {
    g += *seed;
  } else {
    for (auto& v : g.values()) v += T(1);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && node->grad.shape() == node->value.shape()) node->backward(*node);
  }
  // Interior buffers are no longer needed; leaves keep their accumulated grads.
  for (Node<T>* node : order) {
    if (node->backward) node->grad = Tensor<T>();
  }
}

}  // namespace siamattn
