#include "helix/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#include "helix/errors.hpp"

namespace helix::ad {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<double> values,
                                              bool requires_grad) {
  for (auto d : shape)
    if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
  if (numel(shape) != static_cast<std::int64_t>(values.size()))
    throw DimensionError("shape " + to_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> values(static_cast<std::size_t>(std::max<std::int64_t>(0, ad::numel(shape))), value);
  return Tensor(make_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::int64_t Tensor::dim(int axis) const {
  const int nd = ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd)
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
  return shape()[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) { impl_->requires_grad = on; }

bool Tensor::is_leaf() const { return impl_->producer == nullptr; }

std::span<const double> Tensor::grad() const {
  return impl_->grad_buffer();
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  return Tensor(make_impl(impl_->shape, impl_->data, false));
}

Tape Tape::record(const Tensor& loss) {
  Tape tape;
  // Iterative post-order DFS; inputs visited in recorded order so the result
  // depends only on the graph.
  std::unordered_set<const detail::TensorImpl*> seen;
  struct Frame {
    std::shared_ptr<detail::TensorImpl> t;
    std::size_t next = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.impl()});
  seen.insert(loss.impl().get());
  while (!stack.empty()) {
    Frame& top = stack.back();
    const auto& node = top.t->producer;
    if (node && top.next < node->inputs.size()) {
      auto child = node->inputs[top.next++];
      if (child->requires_grad && seen.insert(child.get()).second) stack.push_back({child});
      continue;
    }
    tape.order_.push_back(top.t);
    stack.pop_back();
  }
  return tape;
}

void Tape::replay_backward() const {
  if (order_.empty()) return;
  auto& seed = order_.back()->grad_buffer();
  std::fill(seed.begin(), seed.end(), 0.0);
  seed[0] = 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    detail::TensorImpl& t = **it;
    if (!t.producer) continue;
    if (!t.grad.empty()) t.producer->backward(t);
    t.grad.clear();
    t.grad.shrink_to_fit();
  }
}

std::vector<std::string_view> Tape::ops() const {
  std::vector<std::string_view> out;
  for (const auto& t : order_) out.push_back(t->producer ? t->producer->op : std::string_view("leaf"));
  return out;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw UsageError("backward() needs a scalar loss, got shape " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  if (!loss.requires_grad()) return;
  Tape::record(loss).replay_backward();
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor make_result(std::string_view op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs,
                   std::function<void(const detail::TensorImpl& out)> rule) {
  bool track = false;
  if (!g_grad_enabled) inputs.clear();
  for (const auto& in : inputs) track = track || (in.defined() && in.requires_grad());
  auto impl = make_impl(std::move(shape), std::move(values), track);
  if (track) {
    auto node = std::make_shared<detail::Node>();
    node->op = op;
    for (auto& in : inputs)
      if (in.defined()) node->inputs.push_back(in.impl());
    node->backward = std::move(rule);
    impl->producer = std::move(node);
  }
  return Tensor(std::move(impl));
}

}  // namespace helix::ad
