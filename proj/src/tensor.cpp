#include "ppks/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "ppks/error.hpp"

namespace ppks {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

void check_shape(const Shape& shape) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

thread_local Tape tls_tape;
thread_local bool tls_grad_enabled = true;

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return full({1}, value, requires_grad); }

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

std::span<float> Tensor::grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

std::span<const float> Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

Tensor Tensor::clone() const { return from(shape(), impl_->data, false); }

Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(new_shape);
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

void Tape::record(std::vector<std::shared_ptr<TensorImpl>> inputs, std::shared_ptr<TensorImpl> output,
                  BackwardFn backward_fn) {
  nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward_fn)});
}

Tape& active_tape() { return tls_tape; }

bool grad_enabled() { return tls_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(tls_grad_enabled) { tls_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tls_grad_enabled = previous_; }

float* grad_sink(const std::shared_ptr<TensorImpl>& impl) {
  if (!impl->requires_grad) return nullptr;
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0f);
  return impl->grad.data();
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  Tape& tape = active_tape();
  const auto& nodes = tape.nodes();
  auto producer = std::find_if(nodes.rbegin(), nodes.rend(),
                               [&](const Tape::Node& node) { return node.output == loss.impl(); });
  if (producer == nodes.rend()) {
    tape.clear();
    throw ValueError("backward(): loss was not produced on the active tape");
  }
  loss.impl()->grad.assign(1, 0.0f);
  loss.impl()->grad[0] += 1.0f;
  for (auto it = producer; it != nodes.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
  // Intermediate buffers are released with the tape; leaves keep their grads.
  tape.clear();
}

}  // namespace ppks
