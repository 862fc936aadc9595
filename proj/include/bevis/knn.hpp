#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace bevis {

struct KnnGraph {
  std::size_t k = 0;
  std::vector<std::size_t> neighbors;  // N × k, nearest first

  std::size_t size() const { return k ? neighbors.size() / k : 0; }
  std::span<const std::size_t> row(std::size_t i) const {
    return std::span<const std::size_t>(neighbors).subspan(i * k, k);
  }
  friend bool operator==(const KnnGraph&, const KnnGraph&) = default;
};

/// Exact k nearest neighbours by xyz distance over rows of `rows` (the first
/// three of every `stride` values). Ordered by (distance, index); a point is
/// never its own neighbour. Requires n > k.
KnnGraph build_knn(std::span<const double> rows, std::size_t stride, std::size_t k);

namespace reference {
/// All-pairs version of build_knn.
KnnGraph build_knn(std::span<const double> rows, std::size_t stride, std::size_t k);
}  // namespace reference

}  // namespace bevis
