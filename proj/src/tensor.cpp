#include "bevis/tensor.hpp"

#include <algorithm>
#include <unordered_set>

namespace bevis {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_string(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return filled(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_string(shape()));
  }
  return node_->shape[axis];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

Tensor Tensor::reshape(Shape shape) const {
  if (shape_numel(shape) != size()) {
    throw ShapeError("cannot reshape " + shape_string(this->shape()) + " to " +
                     shape_string(shape));
  }
  return make_op_result(std::move(shape), node_->value, {*this}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor make_op_result(Shape shape, std::vector<double> value,
                      const std::vector<Tensor>& inputs,
                      std::function<void(detail::Node&)> backward) {
  if (shape_numel(shape) != value.size()) {
    throw ShapeError("op produced " + std::to_string(value.size()) +
                     " values for shape " + shape_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  const bool track = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
  if (track) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward() needs a scalar loss");
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) {
    if (!node->parents.empty()) node->grad.assign(node->value.size(), 0.0);
  }
  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward) {
      for (auto& p : node->parents) {
        if (p->requires_grad) p->ensure_grad();
      }
      node->backward(*node);
    }
  }
}

void zero_grad(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace bevis
