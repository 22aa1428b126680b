#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ims/errors.hpp"

namespace ims {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_size(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ')';
  return os.str();
}

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // sized like values iff requires_grad
  bool requires_grad = false;
  Tape<T>* tape = nullptr;  // tape that recorded the producing op
  std::uint64_t tape_id = 0;
  std::int64_t tape_index = -1;
};

}  // namespace detail

/// Dense n-dimensional array with optional gradient buffer. Copies are
/// shallow: two Tensor handles may alias one node, which is what lets
/// recorded operations keep their inputs alive. Use clone()/detached() for
/// value copies.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), T(0), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    return Tensor(std::move(shape), value, requires_grad);
  }

  static Tensor from_values(Shape shape, std::vector<T> values,
                            bool requires_grad = false) {
    if (shape_size(shape) != static_cast<std::int64_t>(values.size())) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor scalar(T value) { return from_values({}, {value}); }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->values.size()); }

  std::span<T> values() { return node_->values; }
  std::span<const T> values() const { return node_->values; }

  T item() const {
    if (size() != 1) {
      throw ArgumentError("item() requires a single-element tensor, got shape " +
                          shape_str(shape()));
    }
    return node_->values[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) {
      node_->grad.assign(node_->values.size(), T(0));
    } else {
      node_->grad.clear();
      node_->grad.shrink_to_fit();
    }
  }

  std::span<T> grad() {
    ensure_has_grad();
    return node_->grad;
  }
  std::span<const T> grad() const {
    ensure_has_grad();
    return node_->grad;
  }

  void zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  /// Value copy that does not track gradients and carries no tape link.
  Tensor detached() const {
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode<T>>();
    t.node_->shape = node_->shape;
    t.node_->values = node_->values;
    return t;
  }

  /// Deep copy preserving requires_grad (grad buffer reset to zero).
  Tensor clone() const {
    Tensor t = detached();
    t.set_requires_grad(node_->requires_grad);
    return t;
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  detail::TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode<T>>& node_ptr() const { return node_; }

 private:
  Tensor(Shape shape, T fill, bool requires_grad) {
    node_ = std::make_shared<detail::TensorNode<T>>();
    const auto n = shape_size(shape);
    node_->shape = std::move(shape);
    node_->values.assign(static_cast<std::size_t>(n), fill);
    set_requires_grad(requires_grad);
  }

  void ensure_has_grad() const {
    if (!node_->requires_grad) {
      throw ArgumentError("tensor does not track gradients");
    }
  }

  std::shared_ptr<detail::TensorNode<T>> node_;
};

}  // namespace ims
