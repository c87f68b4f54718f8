// Copyright (c) 2026 CAR contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "car/error.hpp"

namespace car {

using Shape = std::vector<int>;

inline long shape_numel(const Shape& s) {
  long n = 1;
  for (int e : s) {
    if (e <= 0) throw DimensionError("tensor extents must be positive");
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
class GradTape;

namespace detail {
template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> v;
  bool requires_grad = false;
  // Which tape (if any) this tensor is bound to, and its node there. A stale
  // tape id simply means "not on the active tape".
  uint64_t tape_id = 0;
  int node = -1;
};
}  // namespace detail

/// Dense row-major tensor with shared storage. Copies of a Tensor alias the
/// same buffer; use clone() for an independent one. The element type is the
/// dtype: float for training, double for verification.
template <typename T>
class Tensor {
 public:
  Tensor() : d_(std::make_shared<detail::TensorData<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0))
      : d_(std::make_shared<detail::TensorData<T>>()) {
    d_->shape = std::move(shape);
    d_->v.assign(size_t(shape_numel(d_->shape)), fill);
  }

  static Tensor from(Shape shape, std::vector<T> data) {
    Tensor t;
    long n = shape_numel(shape);
    if (n != long(data.size()))
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    t.d_->shape = std::move(shape);
    t.d_->v = std::move(data);
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  const Shape& shape() const { return d_->shape; }
  int dim(int i) const { return d_->shape[size_t(i)]; }
  int ndim() const { return int(d_->shape.size()); }
  long size() const { return long(d_->v.size()); }

  std::vector<T>& vec() { return d_->v; }
  const std::vector<T>& vec() const { return d_->v; }
  T* data() { return d_->v.data(); }
  const T* data() const { return d_->v.data(); }
  T& operator[](long i) { return d_->v[size_t(i)]; }
  const T& operator[](long i) const { return d_->v[size_t(i)]; }

  T item() const {
    if (size() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape()));
    return d_->v[0];
  }

  Tensor& set_requires_grad(bool b) {
    d_->requires_grad = b;
    return *this;
  }
  bool requires_grad() const { return d_->requires_grad; }

  /// Deep copy; never participates in any tape until marked again.
  Tensor clone() const {
    Tensor t;
    t.d_->shape = d_->shape;
    t.d_->v = d_->v;
    return t;
  }

  /// Same storage, stripped of gradient participation.
  Tensor detached() const {
    Tensor t;
    t.d_->shape = d_->shape;
    t.d_->v = d_->v;  // copy; detached views that alias would leak grads through mutation
    return t;
  }

  bool same_storage(const Tensor& o) const { return d_ == o.d_; }

  // tape bookkeeping (internal)
  uint64_t tape_id() const { return d_->tape_id; }
  int node() const { return d_->node; }
  void bind_node(uint64_t tape, int node) const {
    d_->tape_id = tape;
    d_->node = node;
  }

 private:
  std::shared_ptr<detail::TensorData<T>> d_;
};

/// Reverse-mode tape. Construction makes it the active tape for this thread;
/// ops record backward closures onto it when any input participates. The tape
/// is confined to one thread for its lifetime.
template <typename T>
class GradTape {
 public:
  GradTape() : id_(next_id()) {
    prev_ = active_slot();
    active_slot() = this;
  }
  ~GradTape() { active_slot() = prev_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return active_slot(); }

  /// Node id of t on this tape; creates a leaf node for fresh requires_grad
  /// tensors. Returns -1 for non-participating inputs.
  int use(const Tensor<T>& t) {
    if (t.tape_id() == id_ && t.node() >= 0) return t.node();
    if (!t.requires_grad()) return -1;
    nodes_.push_back(Node{t.size(), {}, nullptr});
    int id = int(nodes_.size()) - 1;
    t.bind_node(id_, id);
    return id;
  }

  using BackwardFn = std::function<void(GradTape&, const std::vector<T>&)>;

  /// Registers out as the result of a recorded op. fn scatters the output
  /// gradient into parent buffers via grad_buf().
  void emit(const Tensor<T>& out, BackwardFn fn) {
    nodes_.push_back(Node{out.size(), {}, std::move(fn)});
    out.bind_node(id_, int(nodes_.size()) - 1);
  }

  /// Gradient accumulator of a node, allocated (zeroed) on first touch.
  std::vector<T>& grad_buf(int node) {
    Node& n = nodes_[size_t(node)];
    if (n.g.empty()) n.g.assign(size_t(n.n), T(0));
    return n.g;
  }

  /// Reverse sweep from a scalar root. Node creation order is a topological
  /// order, so one reverse pass visits every needed node exactly once.
  void backward(const Tensor<T>& root) {
    if (root.size() != 1) throw DimensionError("backward() root must be scalar");
    if (root.tape_id() != id_ || root.node() < 0)
      throw ConfigError("backward() root is not recorded on this tape");
    if (ran_backward_) throw ConfigError("backward() may run once per tape");
    ran_backward_ = true;
    grad_buf(root.node())[0] = T(1);
    for (int i = root.node(); i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (!n.g.empty() && n.bw) n.bw(*this, n.g);
    }
  }

  /// Gradient of t, or nullopt when t never participated. Missing gradients
  /// are reported as absent, not silently zero-filled.
  std::optional<Tensor<T>> grad(const Tensor<T>& t) const {
    if (t.tape_id() != id_ || t.node() < 0) return std::nullopt;
    const Node& n = nodes_[size_t(t.node())];
    if (n.g.empty()) return std::nullopt;
    return Tensor<T>::from(t.shape(), n.g);
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    long n;
    std::vector<T> g;
    BackwardFn bw;
  };

  static GradTape*& active_slot() {
    thread_local GradTape* slot = nullptr;
    return slot;
  }
  static uint64_t next_id() {
    static std::atomic<uint64_t> ctr{1};
    return ctr.fetch_add(1);
  }

  std::vector<Node> nodes_;
  GradTape* prev_ = nullptr;
  uint64_t id_;
  bool ran_backward_ = false;
};

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  for (long i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i]))
      throw NumericError(std::string(op) + ": non-finite value in output");
  }
}

}  // namespace car
