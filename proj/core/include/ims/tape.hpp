#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "ims/errors.hpp"
#include "ims/tensor.hpp"

namespace ims {

/// Records the backward step of every differentiable primitive executed while
/// a Scope is open, in execution order. backward() replays the steps in strict
/// reverse order, once; a consumed tape rejects further backward calls.
///
/// A tape and the tensors recorded on it belong to a single worker; there is
/// no internal synchronization. Independent runs each own their tape.
template <typename T>
class Tape {
 public:
  Tape() : id_(next_id_.fetch_add(1, std::memory_order_relaxed) + 1) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Makes a tape the active recording target for the current thread.
  class Scope {
   public:
    explicit Scope(Tape& tape) : prev_(current_) { current_ = &tape; }
    ~Scope() { current_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* current() { return current_; }

  std::int64_t record(std::function<void()> backward_step) {
    steps_.push_back(std::move(backward_step));
    return static_cast<std::int64_t>(steps_.size()) - 1;
  }

  /// Marks an op output as produced by entry `index` of this tape.
  void attach(const Tensor<T>& out, std::int64_t index) {
    auto* node = out.node();
    node->tape = this;
    node->tape_id = id_;
    node->tape_index = index;
  }

  bool owns(const Tensor<T>& t) const {
    return t.node()->tape == this && t.node()->tape_id == id_;
  }

  bool consumed() const { return consumed_; }
  std::int64_t size() const { return static_cast<std::int64_t>(steps_.size()); }
  std::uint64_t id() const { return id_; }

  /// Seeds d(root)/d(root) = 1 and replays recorded steps from the root's
  /// entry down to the first. Leaf gradients accumulate into .grad().
  void backward(const Tensor<T>& root) {
    if (consumed_) {
      throw TapeError("tape already consumed by a previous backward pass; "
                      "re-record the forward computation");
    }
    if (root.size() != 1 || root.rank() != 0) {
      throw ArgumentError("backward requires a scalar root, got shape " +
                          shape_str(root.shape()));
    }
    if (!owns(root)) {
      throw TapeError("root tensor was not produced on this tape");
    }
    consumed_ = true;
    root.node()->grad.assign(1, T(1));
    for (std::int64_t i = root.node()->tape_index; i >= 0; --i) {
      steps_[static_cast<std::size_t>(i)]();
    }
  }

 private:
  std::vector<std::function<void()>> steps_;
  bool consumed_ = false;
  std::uint64_t id_;

  static inline thread_local Tape* current_ = nullptr;
  static inline std::atomic<std::uint64_t> next_id_{0};
};

/// Runs backward on the thread's active tape. The root must be a scalar that
/// was recorded on that tape; a detached root is a tape error.
template <typename T>
void backward(const Tensor<T>& root) {
  Tape<T>* tape = Tape<T>::current();
  if (tape == nullptr) {
    throw TapeError("no active tape on this thread");
  }
  if (root.node()->tape == nullptr) {
    throw TapeError("root tensor is detached from any tape");
  }
  if (!tape->owns(root)) {
    throw TapeError("root tensor was not produced on the active tape");
  }
  tape->backward(root);
}

}  // namespace ims
