#pragma once

// Dense row-major float32 tensors with a tape-based reverse-mode autodiff.
//
// A Tensor is a shared handle: copies alias the same storage, as in most
// deep-learning frameworks. Use clone() for a deep copy.
//
// Operations (see ops.hpp) record themselves on the calling thread's active
// Tape whenever gradient recording is enabled and at least one input requires
// a gradient. backward() walks that tape in reverse, accumulating (+=) into
// every grad buffer it reaches, and clears the tape afterwards.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ppks {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until a backward pass reaches the tensor
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<float> data() { return impl_->data; }
  std::span<const float> data() const { return impl_->data; }
  float* ptr() { return impl_->data.data(); }
  const float* ptr() const { return impl_->data.data(); }
  float item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer, allocated (zero-filled) on first access.
  std::span<float> grad();
  std::span<const float> grad() const;
  void zero_grad();

  /// Deep copy of shape and data; the copy is a leaf without gradient.
  Tensor clone() const;
  /// Same storage viewed with a different shape of equal element count.
  /// Not recorded on the tape; only use on tensors outside a graph.
  Tensor reshaped(Shape shape) const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of differentiable operations for one execution context.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };

  void record(std::vector<std::shared_ptr<TensorImpl>> inputs,
              std::shared_ptr<TensorImpl> output, BackwardFn backward);
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  std::vector<Node> nodes_;
};

/// The tape of the calling thread.
Tape& active_tape();

bool grad_enabled();

/// Disables recording for the lifetime of the guard (inference, pushes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Reverse pass from a scalar loss; clears the active tape.
void backward(const Tensor& loss);

/// Gradient accumulator for a tape input, or nullptr when it needs none.
float* grad_sink(const std::shared_ptr<TensorImpl>& impl);

}  // namespace ppks
