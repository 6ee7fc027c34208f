#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace helix::ad {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct TensorImpl;

/// One recorded primitive: the inputs it read and the rule that pushes the
/// output gradient back into them.
struct Node {
  std::string_view op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> producer;  // null for leaves

  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense row-major float64 tensor. Copies share storage (handle semantics);
/// use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;
  int ndim() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const;

  std::span<const double> data() const;
  /// Mutable access. Only valid on leaves that are not part of a live graph
  /// (parameter updates, test fixtures).
  std::span<double> mutable_data();
  double item() const;
  double at(std::int64_t flat_index) const { return data()[static_cast<std::size_t>(flat_index)]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;

  /// Gradient buffer; all zeros if nothing was accumulated.
  std::span<const double> grad() const;
  void zero_grad();

  Tensor clone() const;
  /// Copy of the values with no graph history.
  Tensor detach() const { return clone(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // Engine internals.
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Topologically ordered list of the tensors a scalar loss depends on.
/// Replaying it in reverse accumulates gradients into every requires_grad leaf.
class Tape {
 public:
  static Tape record(const Tensor& loss);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward rule in
  /// reverse order. Gradients of intermediate tensors are released as soon as
  /// they have been propagated.
  void replay_backward() const;

  std::size_t size() const { return order_.size(); }
  std::vector<std::string_view> ops() const;

 private:
  std::vector<std::shared_ptr<detail::TensorImpl>> order_;
};

/// Populate grad buffers of all requires_grad leaves reachable from `loss`.
/// Throws UsageError unless loss has exactly one element.
void backward(const Tensor& loss);

/// Builds an output tensor and, when any input requires gradients, records the
/// node producing it. `rule` receives the finished output and must accumulate
/// into the inputs' grad buffers.
Tensor make_result(std::string_view op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs,
                   std::function<void(const detail::TensorImpl& out)> rule);

/// While alive, new results are never recorded on a tape (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// True if any of the inputs participates in gradient tracking.
bool any_requires_grad(std::initializer_list<const Tensor*> inputs);

}  // namespace helix::ad
