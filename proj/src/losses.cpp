#include "bevis/losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace bevis {

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                     std::span<const double> class_weights) {
  if (logits.rank() == 0) throw ShapeError("cross_entropy: scalar logits");
  const std::size_t k = logits.shape().back();
  const std::size_t rows = logits.size() / k;
  if (labels.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows of " + shape_string(logits.shape()));
  }
  if (class_weights.size() != k) {
    throw ShapeError("cross_entropy: " + std::to_string(class_weights.size()) +
                     " class weights for " + std::to_string(k) + " classes");
  }
  for (double w : class_weights) {
    if (!(w > 0.0)) throw std::invalid_argument("cross_entropy: class weights must be positive");
  }

  auto probs = std::make_shared<std::vector<double>>(logits.size(), 0.0);
  double weighted_nll = 0.0;
  double weight_total = 0.0;
  const double* x = logits.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y == kIgnoreLabel) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(k) + ")");
    }
    const double* row = x + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) (*probs)[r * k + j] = std::exp(row[j] - log_z);
    const double w = class_weights[static_cast<std::size_t>(y)];
    weighted_nll += w * (log_z - row[y]);
    weight_total += w;
  }
  const double loss = weight_total > 0.0 ? weighted_nll / weight_total : 0.0;
  std::vector<int> lab(labels.begin(), labels.end());
  std::vector<double> weights(class_weights.begin(), class_weights.end());
  return make_op_result(
      {1}, {loss}, {logits},
      [probs, lab = std::move(lab), weights = std::move(weights), weight_total, rows, k](
          detail::Node& self) {
        if (weight_total <= 0.0) return;
        auto& p = *self.parents[0];
        const double g = self.grad[0] / weight_total;
        for (std::size_t r = 0; r < rows; ++r) {
          const int y = lab[r];
          if (y == kIgnoreLabel) continue;
          const double w = weights[static_cast<std::size_t>(y)] * g;
          for (std::size_t j = 0; j < k; ++j) p.grad[r * k + j] += w * (*probs)[r * k + j];
          p.grad[r * k + static_cast<std::size_t>(y)] -= w;
        }
      });
}

double class_weight_from_frequency(double freq) {
  return -std::log(std::clamp(freq, 1e-6, 1.0 - 1e-6));
}

std::vector<double> class_weights_from_labels(std::span<const int> labels,
                                              std::size_t num_classes) {
  std::vector<double> counts(num_classes, 0.0);
  double total = 0.0;
  for (int y : labels) {
    if (y == kIgnoreLabel) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw std::out_of_range("class_weights_from_labels: label " + std::to_string(y));
    }
    counts[static_cast<std::size_t>(y)] += 1.0;
    total += 1.0;
  }
  std::vector<double> weights(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c)
    weights[c] = class_weight_from_frequency(total > 0.0 ? counts[c] / total : 0.0);
  return weights;
}

}  // namespace bevis
