#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "msnas/common.hpp"

namespace msnas {

// Dense row-major n-d array with handle semantics: copying a Tensor shares
// storage. Gradients live next to the values and have the same shape.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape) {
    Tensor t;
    t.d_ = std::make_shared<Storage>();
    t.d_->shape = std::move(shape);
    t.d_->values.assign(static_cast<size_t>(count(t.d_->shape)), T(0));
    return t;
  }

  static Tensor full(std::vector<int> shape, T value) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.d_->values) v = value;
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<T> values) {
    check_arg(count(shape) == static_cast<int64_t>(values.size()),
              "tensor: shape holds ", count(shape), " elements but ", values.size(),
              " values were given");
    Tensor t;
    t.d_ = std::make_shared<Storage>();
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    return t;
  }

  static Tensor scalar(T value) { return from({1}, {value}); }

  bool defined() const { return d_ != nullptr; }
  const std::vector<int>& shape() const { return d_->shape; }
  int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(d_->values.size()); }

  T* data() { return d_->values.data(); }
  const T* data() const { return d_->values.data(); }
  std::vector<T>& values() { return d_->values; }
  const std::vector<T>& values() const { return d_->values; }

  T item() const {
    check_arg(numel() == 1, "tensor: item() on tensor with ", numel(), " elements");
    return d_->values[0];
  }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  void set_requires_grad(bool v) {
    d_->requires_grad = v;
    if (v) ensure_grad();
  }

  bool has_grad() const { return d_ && !d_->grad.empty(); }
  T* grad_data() {
    ensure_grad();
    return d_->grad.data();
  }
  const std::vector<T>& grad() const { return d_->grad; }
  void ensure_grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), T(0));
  }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
  }

  // Identity of the underlying storage; used for aliasing checks in tests.
  const void* storage_id() const { return d_.get(); }

  bool same_shape(const Tensor& o) const { return d_->shape == o.d_->shape; }

  static int64_t count(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int e : shape) {
      check_arg(e > 0, "tensor: shape extents must be positive, got ", e);
      n *= e;
    }
    return n;
  }

 private:
  struct Storage {
    std::vector<int> shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until needed; same length as values afterwards
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> d_;
};

// Ordered record of executed primitives. Each forward op that participates in
// a gradient pushes one closure; replaying the record back to front visits the
// graph in reverse topological order because execution order is topological.
template <typename T>
class GradTape {
 public:
  explicit GradTape(bool recording = true) : recording_(recording) {}

  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  bool recording() const { return recording_; }
  size_t size() const { return nodes_.size(); }

  void record(std::function<void()> backward_fn) {
    if (recording_) nodes_.push_back(std::move(backward_fn));
  }

  // Seeds d(loss)/d(loss) = 1 and replays the record once. Gradients sum into
  // every reachable tensor that carries a grad buffer.
  void backward(Tensor<T> loss) {
    check_state(recording_, "tape: backward on a non-recording tape");
    check_state(!consumed_, "tape: backward already called; a tape is consumable once");
    check_arg(loss.defined() && loss.numel() == 1, "tape: backward requires a scalar loss");
    check_arg(loss.requires_grad(),
              "tape: loss is not connected to this tape (requires_grad is false)");
    consumed_ = true;
    loss.grad_data()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

 private:
  bool recording_;
  bool consumed_ = false;
  std::vector<std::function<void()>> nodes_;
};

}  // namespace msnas
