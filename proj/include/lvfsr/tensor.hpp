#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lvfsr/error.hpp"

namespace lvfsr {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// Graph node behind a Tensor handle. `backward` reads this node's grad and
/// accumulates into the grads of `parents`.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::string name;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
  bool is_leaf() const { return !backward && parents.empty(); }
};

/// Dense row-major tensor handle. Copies share the underlying node; values
/// produced by operations are never modified afterwards. Leaves (parameters)
/// are the only tensors whose data is updated in place, by the optimizer.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    require(numel(shape) == data.size(), ErrorKind::shape,
            "tensor data length " + std::to_string(data.size()) + " does not match shape " +
                shape_str(shape));
    for (std::size_t extent : shape)
      require(extent > 0, ErrorKind::shape, "tensor extents must be positive: " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)));
  }
  static Tensor full(Shape shape, T value) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  /// Named leaf that participates in differentiation.
  static Tensor parameter(std::string name, Shape shape, std::vector<T> data) {
    Tensor t(std::move(shape), std::move(data), true);
    t.node_->name = std::move(name);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }

  std::span<const T> data() const { return node_->data; }
  /// In-place access; only meaningful for leaves (parameter updates, test setup).
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T item() const {
    require(size() == 1, ErrorKind::shape, "item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  const std::string& name() const { return node_->name; }
  const char* op() const { return node_->op; }
  bool is_leaf() const { return node_->is_leaf(); }

  /// Accumulated gradient; empty when backward has not reached this tensor.
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }

  /// Non-differentiable copy.
  Tensor detach() const { return Tensor(shape(), values()); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(size());
    for (std::size_t i = 0; i < size(); ++i) out[i] = static_cast<U>(node_->data[i]);
    return Tensor<U>(shape(), std::move(out));
  }

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Aborts with a diagnostic naming the producing operation.
template <typename T>
void check_finite(std::span<const T> values, const char* op) {
  for (T v : values)
    if (!std::isfinite(v)) fail(ErrorKind::numeric, std::string("non-finite value produced by ") + op);
}

/// Builds the result of an operation and, if recording is active and any
/// input requires grad, attaches the backward closure.
template <typename T, typename Backward>
Tensor<T> record(const char* op, Shape shape, std::vector<T> data,
                 const std::vector<Tensor<T>>& inputs, Backward&& backward) {
  check_finite<T>(data, op);
  Tensor<T> out(std::move(shape), std::move(data));
  Node<T>& node = out.node();
  node.op = op;
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  node.requires_grad = true;
  node.parents.reserve(inputs.size());
  for (const auto& in : inputs) node.parents.push_back(in.node_ptr());
  node.backward = std::forward<Backward>(backward);
  return out;
}

template <typename T>
using Gradients = std::map<std::string, Tensor<T>>;

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate; the
/// recorded graph is released afterwards and cannot be traversed again.
template <typename T>
Gradients<T> backward(const Tensor<T>& loss) {
  require(loss.defined() && loss.size() == 1, ErrorKind::shape,
          "backward requires a scalar loss, got shape " +
              (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  Node<T>& root = loss.node();
  require(!root.consumed, ErrorKind::state, "backward called twice on the same graph");
  require(root.requires_grad, ErrorKind::state,
          "backward on a loss that was not recorded from any parameter");

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{&root, 0}};
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.grad_buffer()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward) {
      node->grad_buffer();
      node->backward(*node);
    }
  }

  Gradients<T> grads;
  for (Node<T>* node : order) {
    if (node->is_leaf() && !node->name.empty())
      grads.emplace(node->name, Tensor<T>(node->shape, node->grad_buffer()));
  }
  for (Node<T>* node : order) {
    if (node->is_leaf()) continue;
    node->backward = nullptr;
    node->parents.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->consumed = true;
  }
  root.consumed = true;
  return grads;
}

/// Ordered, uniquely named collection of parameter leaves.
template <typename T>
class ParameterSet {
 public:
  Tensor<T>& add(Tensor<T> param) {
    require(!param.name().empty(), ErrorKind::state, "parameters must be named");
    require(!contains(param.name()), ErrorKind::state, "duplicate parameter name " + param.name());
    index_.emplace(param.name(), params_.size());
    params_.push_back(std::move(param));
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorKind::state, "unknown parameter " + name);
    return params_[it->second];
  }
  Tensor<T>& at(const std::string& name) {
    return const_cast<Tensor<T>&>(std::as_const(*this).at(name));
  }

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.name());
    return out;
  }
  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  Tensor<T>& operator[](std::size_t i) { return params_[i]; }
  const Tensor<T>& operator[](std::size_t i) const { return params_[i]; }

 private:
  std::vector<Tensor<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace lvfsr
