#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bevis/tensor.hpp"

namespace bevis {

/// Rows labelled with this value are skipped by the losses.
inline constexpr int kIgnoreLabel = -1;

/// Weighted mean negative log-softmax of the true class over rows of
/// logits[..., K]:  Σ w[y]·nll / Σ w[y].  Rows with kIgnoreLabel are skipped;
/// with no labelled rows the loss is a constant 0.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                     std::span<const double> class_weights);

/// −ln(freq), freq clamped to [1e-6, 1 − 1e-6].
double class_weight_from_frequency(double freq);

/// Per-class −ln(frequency) over all non-ignored labels.
std::vector<double> class_weights_from_labels(std::span<const int> labels,
                                              std::size_t num_classes);

}  // namespace bevis
