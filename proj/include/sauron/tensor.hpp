#pragma once

// Dense tensors with a reverse-mode differentiation graph.
//
// A Tensor is a cheap handle onto a shared graph node. Values produced by ops
// are never mutated afterwards; only leaves (parameters, inputs) expose
// mutable storage, and that is what the optimizer writes into.

#include <atomic>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sauron/error.hpp"

namespace sauron {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

template <std::floating_point T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;
  std::uint64_t id = next_node_id();
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel_of(shape) != values.size())
      throw ShapeError("Tensor::from: shape " + detail::shape_str(shape) + " holds " +
                       std::to_string(numel_of(shape)) + " values, got " +
                       std::to_string(values.size()));
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> v(numel_of(shape), T(0));
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor filled(Shape shape, T fill, bool requires_grad = false) {
    std::vector<T> v(numel_of(shape), fill);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  /// A trainable leaf.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    return from(std::move(shape), std::move(values), true);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  std::uint64_t id() const { return node_->id; }
  const char* op_name() const { return node_->op; }

  std::span<const T> data() const { return node_->value; }
  T item() const {
    if (numel() != 1) throw ShapeError("Tensor::item on tensor of shape " + detail::shape_str(shape()));
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  /// Mutable storage; only leaves may be written.
  std::span<T> mutable_data() {
    if (node_->backward_fn || !node_->parents.empty())
      throw InvalidArgument("mutable_data() on a non-leaf tensor produced by '" +
                            std::string(node_->op) + "'");
    return node_->value;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  void clear_grad() { node_->grad.clear(); }

  /// Copy of the values as a fresh leaf, cut from any graph.
  Tensor detach(bool requires_grad = false) const {
    return from(shape(), node_->value, requires_grad);
  }

  const NodePtr& node() const { return node_; }

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

 private:
  NodePtr node_;
};

namespace detail {

// Builds the result node of an op. Parents are only retained when a gradient
// can flow through them.
template <std::floating_point T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> parents, std::function<void(Node<T>&)> backward) {
  for (std::size_t i = 0; i < value.size(); ++i) {
    if (!std::isfinite(value[i]))
      throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <std::floating_point T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_mismatch(op, "lhs", a.shape(), "rhs", b.shape());
}

// Parent grad buffer, or nullptr when no gradient is needed for it.
template <std::floating_point T>
T* grad_of(Node<T>& self, std::size_t parent) {
  auto& p = *self.parents[parent];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

}  // namespace detail

/// Reverse-mode sweep from a scalar root. Gradients of every reachable node are
/// overwritten, never accumulated across calls.
template <std::floating_point T>
void backward(const Tensor<T>& root) {
  if (root.numel() != 1)
    throw ShapeError("backward: root must be a scalar, got shape " + detail::shape_str(root.shape()));
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (NodeT* n : order) n->grad.assign(n->value.size(), T(0));
  root.node()->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<T>("add", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (T* g = detail::grad_of(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result<T>("sub", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    if (T* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (T* g = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<T>("mul", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (T* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    if (T* g = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
  });
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return detail::make_result<T>("scale", a.shape(), std::move(out), {a}, [factor](detail::Node<T>& self) {
    if (T* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  return detail::make_result<T>("sum", {1}, {total}, {a}, [](detail::Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      const T up = self.grad[0];
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += up;
    }
  });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <std::floating_point T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope = T(0.01)) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0 ? a[i] : a[i] * slope;
  return detail::make_result<T>("leaky_relu", a.shape(), std::move(out), {a}, [slope](detail::Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      const auto& x = self.parents[0]->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += x[i] > 0 ? self.grad[i] : self.grad[i] * slope;
    }
  });
}

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0 ? a[i] : T(0);
  return detail::make_result<T>("relu", a.shape(), std::move(out), {a}, [](detail::Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      const auto& x = self.parents[0]->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (x[i] > 0) g[i] += self.grad[i];
    }
  });
}

/// Elementwise maximum; ties route the gradient to the left operand.
template <std::floating_point T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("maximum", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] >= b[i] ? a[i] : b[i];
  return detail::make_result<T>("maximum", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    T* ga = detail::grad_of(self, 0);
    T* gb = detail::grad_of(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (av[i] >= bv[i]) {
        if (ga) ga[i] += self.grad[i];
      } else if (gb) {
        gb[i] += self.grad[i];
      }
    }
  });
}

template <std::floating_point T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <std::floating_point T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <std::floating_point T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <std::floating_point T>
Tensor<T> operator*(T s, const Tensor<T>& a) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Slicing helpers used by structural pruning and the optimizer.
// ---------------------------------------------------------------------------

/// Drops the given (sorted, unique) indices along `axis` of a row-major array.
template <typename T>
std::vector<T> remove_along_axis(std::span<const T> values, const Shape& shape, std::size_t axis,
                                 const std::vector<std::size_t>& drop, Shape* new_shape = nullptr) {
  if (axis >= shape.size()) throw InvalidArgument("remove_along_axis: axis out of range");
  std::vector<bool> dropped(shape[axis], false);
  for (std::size_t d : drop) {
    if (d >= shape[axis]) throw InvalidArgument("remove_along_axis: index " + std::to_string(d) + " out of range");
    dropped[d] = true;
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  std::size_t kept = 0;
  for (bool d : dropped) kept += d ? 0 : 1;
  std::vector<T> out;
  out.reserve(outer * kept * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t a = 0; a < shape[axis]; ++a) {
      if (dropped[a]) continue;
      const T* src = values.data() + (o * shape[axis] + a) * inner;
      out.insert(out.end(), src, src + inner);
    }
  if (new_shape) {
    *new_shape = shape;
    (*new_shape)[axis] = kept;
  }
  return out;
}

}  // namespace sauron
