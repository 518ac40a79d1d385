#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pit/error.hpp"
#include "pit/rng.hpp"

namespace pit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
class Tape;

// Dense row-major tensor. Copies are shallow handles onto the same buffer;
// buffers are immutable after construction except for gradient accumulation
// and explicit in-place parameter updates between passes.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_numel(shape_), T(0))) {}

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    if (values.size() != shape_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<T>>(std::move(values));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    for (T& x : t.values_mut()) x = v;
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (T& x : t.values_mut()) x = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  static Tensor trunc_normal(Shape shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (T& x : t.values_mut()) x = static_cast<T>(rng.truncated_normal(stddev));
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  const std::vector<T>& values() const { return *data_; }
  std::vector<T>& values_mut() { return *data_; }
  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of size " + std::to_string(size()));
    return (*data_)[0];
  }

  // Deep copy of the value buffer; the result is detached.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

  // Same buffer, no tape participation.
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    t.grad_ = grad_;
    t.requires_grad_ = requires_grad_;
    return t;
  }

  bool requires_grad() const { return requires_grad_; }

  // Accumulated gradient, or nullptr while absent.
  const std::vector<T>* grad() const {
    return (grad_ && grad_->present) ? &grad_->value : nullptr;
  }

  void zero_grad() {
    if (grad_) {
      grad_->present = false;
      grad_->value.clear();
    }
  }

  // Tape this tensor is recorded on, or nullptr if detached / tape destroyed.
  Tape<T>* tape() const { return tape_alive_.expired() ? nullptr : tape_; }
  int node() const { return tape() ? node_ : -1; }

 private:
  struct GradSlot {
    std::vector<T> value;
    bool present = false;
  };

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<GradSlot> grad_;
  bool requires_grad_ = false;
  Tape<T>* tape_ = nullptr;
  int node_ = -1;
  std::weak_ptr<char> tape_alive_;

  friend class Tape<T>;
};

// Reverse-mode differentiation tape. Built per forward pass (define-by-run),
// consumed by one backward() call, then discarded. Single-threaded.
template <typename T>
class Tape {
 public:
  // Backward rule: receives the tape and the node's own id.
  using BackwardFn = std::function<void(Tape&, int)>;

  Tape() : alive_(std::make_shared<char>(0)) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Register a gradient-requiring leaf. Grad accumulates into the tensor's
  // own slot, shared by all handles of this parameter.
  void watch(Tensor<T>& t) {
    if (!t.defined()) throw ContractError("watch() on undefined tensor");
    if (t.tape() == this) return;
    if (!t.grad_) t.grad_ = std::make_shared<typename Tensor<T>::GradSlot>();
    t.requires_grad_ = true;
    bind(t, record({}, nullptr));
    watched_.push_back(t);
  }

  // Record an operation node; parents use -1 for untaped inputs.
  int record(std::vector<int> parents, BackwardFn fn) {
    nodes_.push_back(Node{std::move(parents), std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Attach an op result to this tape.
  void bind(Tensor<T>& t, int node) {
    t.tape_ = this;
    t.node_ = node;
    t.tape_alive_ = alive_;
  }

  int node_of(const Tensor<T>& t) const { return t.tape() == this ? t.node_ : -1; }

  std::size_t num_nodes() const { return nodes_.size(); }
  const std::vector<int>& parents_of(int node) const { return nodes_.at(node).parents; }

  // Gradient buffer of a node during the backward sweep (empty => untouched).
  std::vector<T>& acc_grad(int node, std::size_t numel) {
    auto& g = grads_[node];
    if (g.empty()) g.assign(numel, T(0));
    return g;
  }

  const std::vector<T>& out_grad(int node) const { return grads_[node]; }
  bool has_grad(int node) const { return !grads_[node].empty(); }

  // Reverse accumulation from a scalar loss. Leaves unreachable from the
  // loss keep their grad absent.
  void backward(const Tensor<T>& loss) {
    if (loss.tape() != this) throw ContractError("backward(): loss is not on this tape");
    if (loss.size() != 1) throw ContractError("backward(): loss must be scalar, got shape " + shape_str(loss.shape()));
    if (used_) throw ContractError("backward(): tape already consumed");
    used_ = true;

    grads_.assign(nodes_.size(), {});
    grads_[loss.node_] = {T(1)};
    for (int i = loss.node_; i >= 0; --i) {
      if (grads_[i].empty()) continue;
      if (nodes_[i].backward) nodes_[i].backward(*this, i);
    }
    for (auto& leaf : watched_) {
      auto& g = grads_[leaf.node_];
      if (g.empty()) continue;
      auto& slot = *leaf.grad_;
      if (!slot.present) {
        slot.value.assign(leaf.size(), T(0));
        slot.present = true;
      }
      if (slot.value.size() != g.size())
        throw ContractError("grad slot size mismatch for watched leaf");
      for (std::size_t k = 0; k < g.size(); ++k) slot.value[k] += g[k];
    }
  }

 private:
  struct Node {
    std::vector<int> parents;
    BackwardFn backward;  // null for leaves
  };

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  std::vector<Tensor<T>> watched_;
  std::shared_ptr<char> alive_;
  bool used_ = false;
};

// The live tape shared by a set of op inputs (nullptr when all detached).
// Mixing two live tapes in one op is a usage error.
template <typename T>
Tape<T>* tape_of(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* found = nullptr;
  for (const Tensor<T>* t : inputs) {
    Tape<T>* tp = t->tape();
    if (!tp) continue;
    if (found && tp != found) throw ContractError("op inputs recorded on two different tapes");
    found = tp;
  }
  return found;
}

}  // namespace pit
