#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bevis {

using Shape = std::vector<std::size_t>;

/// Raised for any shape-inconsistent tensor operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major double tensor. Copies share storage; the autodiff graph is
/// held by parent links, so each forward pass owns its own tape.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Empty span until a backward pass has reached this tensor.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();

  /// Same values, no history.
  Tensor detach() const;
  /// Shares storage and history, with a different shape of equal size.
  Tensor reshape(Shape shape) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op_result(Shape, std::vector<double>, const std::vector<Tensor>&,
                               std::function<void(detail::Node&)>);
};

/// Builds an op output. History is recorded only when an input requires
/// gradients; `backward` then receives the output node.
Tensor make_op_result(Shape shape, std::vector<double> value,
                      const std::vector<Tensor>& inputs,
                      std::function<void(detail::Node&)> backward);

inline Tensor make_op_result(Shape shape, std::vector<double> value,
                             std::initializer_list<Tensor> inputs,
                             std::function<void(detail::Node&)> backward) {
  return make_op_result(std::move(shape), std::move(value), std::vector<Tensor>(inputs),
                        std::move(backward));
}

/// Reverse-mode pass from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are recomputed each call.
void backward(const Tensor& loss);

void zero_grad(std::span<Tensor> params);

}  // namespace bevis
