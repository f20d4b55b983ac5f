#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <utility>

#include "aligngen/diffcore/tensor.hpp"
#include "aligngen/errors.hpp"

namespace aligngen::ad {

template <typename T>
class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& dims() const { return value().dims(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const { return tape->requires_grad(id); }
  // Gradient accumulated by the last backward(); zeros if none reached it.
  Tensor<T> grad() const { return tape->grad_or_zeros(id); }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
// sweep over ids is a valid topological order for backward.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    check_finite("leaf", value);
    nodes_.push_back(Node{std::move(value), {}, requires_grad, false, {}});
    return {this, nodes_.size() - 1};
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // Appends the result of an operation. `fn` receives the output gradient and
  // must accumulate into the parents; it is dropped when no input needs grad.
  Var<T> record(std::string_view op, Tensor<T> value, bool requires_grad,
                Backward fn) {
    check_finite(op, value);
    nodes_.push_back(Node{std::move(value), {}, requires_grad, false,
                          requires_grad ? std::move(fn) : Backward{}});
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Mutable gradient buffer, zero-initialized on first touch.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.dims());
      n.has_grad = true;
    }
    return n.grad;
  }

  void accumulate(std::size_t id, const Tensor<T>& g) {
    if (!requires_grad(id)) return;
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = g.dims() == n.value.dims() ? g : g.reshaped(n.value.dims());
      n.has_grad = true;
      return;
    }
    T* buf = n.grad.raw();
    const T* src = g.raw();
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += src[i];
  }

  void accumulate(std::size_t id, Tensor<T>&& g) {
    if (!requires_grad(id)) return;
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = g.dims() == n.value.dims() ? std::move(g) : g.reshaped(n.value.dims());
      n.has_grad = true;
      return;
    }
    T* buf = n.grad.raw();
    const T* src = g.raw();
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += src[i];
  }

  Tensor<T> grad_or_zeros(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.has_grad ? n.grad : Tensor<T>(n.value.dims());
  }

  bool has_grad(std::size_t id) const { return nodes_.at(id).has_grad; }

  // Seeds d(root)/d(root) = 1 for a 1x1 root and sweeps backward.
  void backward(Var<T> root) {
    if (root.tape != this) throw ArgumentError("backward: var from another tape");
    if (value(root.id).size() != 1) {
      throw ShapeError("backward: root must be a scalar, got " +
                       shape_str(value(root.id).dims()));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor<T>();
    }
    grad_buffer(root.id)[0] = T{1};
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) {
        // Gradient buffers of parents may be created while this runs; deque
        // keeps references stable.
        n.backward(*this, n.grad);
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  static void check_finite(std::string_view op, const Tensor<T>& v) {
    if (!v.all_finite()) {
      throw NumericError(std::string(op) + ": non-finite value in output " +
                         shape_str(v.dims()));
    }
  }

  std::deque<Node> nodes_;
};

}  // namespace aligngen::ad
