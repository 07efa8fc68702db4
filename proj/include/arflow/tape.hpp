#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "arflow/errors.hpp"
#include "arflow/tensor.hpp"

namespace arflow {

/// Append-only record of differentiable operations.
///
/// Operations record themselves on the tape that is active on the current
/// thread (see Tape::Recording) when at least one input requires a gradient.
/// Append order is a valid topological order, so backward() simply replays
/// the local gradient rules in reverse. A tape supports exactly one backward
/// pass; afterwards it releases every intermediate it was keeping alive.
template <typename T>
class Tape {
 public:
  using Impl = detail::TensorImpl<T>;
  using GradRule = std::function<void(const Buffer<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  ~Tape() {
    if (active() == this) active() = nullptr;
  }

  /// RAII scope that makes a tape the active one for this thread.
  class Recording {
   public:
    explicit Recording(Tape& tape) : prev_(active()) {
      if (tape.consumed_) throw TapeError("cannot record on a consumed tape");
      active() = &tape;
    }
    ~Recording() { active() = prev_; }
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    Tape* prev_;
  };

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

  /// The rule must capture (and so keep alive) whatever parents it writes to.
  void record(std::shared_ptr<Impl> out, GradRule rule) {
    if (consumed_) throw TapeError("cannot record on a consumed tape");
    out->requires_grad = true;
    nodes_.push_back(Node{std::move(out), std::move(rule)});
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Accumulates d(root)/d(leaf) into the grad buffer of every leaf that
  /// requires a gradient, then marks the tape consumed.
  void backward(const Tensor<T>& root) {
    if (consumed_) throw TapeError("backward called twice on the same tape");
    if (!root.defined() || root.numel() != 1)
      throw TapeError("backward root must be a scalar tensor");
    bool found = false;
    for (const auto& n : nodes_) {
      if (n.out == root.impl()) {
        found = true;
        break;
      }
    }
    if (!found) throw TapeError("backward root was not produced on this tape");

    // Intermediate grads from an earlier use of the same tensors must not leak in.
    for (auto& n : nodes_) n.out->grad.clear();
    root.impl()->ensure_grad()[0] += T(1);

    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->out->grad.empty()) continue;
      it->rule(it->out->grad);
    }
    consumed_ = true;
    nodes_.clear();
  }

 private:
  struct Node {
    std::shared_ptr<Impl> out;
    GradRule rule;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

template <typename T>
void backward(const Tensor<T>& root, Tape<T>& tape) {
  tape.backward(root);
}

namespace detail {

/// Returns the active tape if any input participates in differentiation.
template <typename T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return nullptr;
  for (const Tensor<T>* t : inputs)
    if (t->defined() && t->requires_grad()) return tape;
  return nullptr;
}

template <typename T>
Tape<T>* recording_tape(const std::vector<Tensor<T>>& inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return nullptr;
  for (const auto& t : inputs)
    if (t.requires_grad()) return tape;
  return nullptr;
}

// Grad buffer of an input, or nullptr when the input is a constant.
template <typename T>
Buffer<T>* grad_of(const std::shared_ptr<TensorImpl<T>>& impl) {
  return impl->requires_grad ? &impl->ensure_grad() : nullptr;
}

}  // namespace detail
}  // namespace arflow
