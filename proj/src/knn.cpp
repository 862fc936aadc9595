#include "bevis/knn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>

namespace bevis {

namespace {

using Candidate = std::pair<double, std::size_t>;  // (squared distance, index)

std::size_t check_inputs(std::span<const double> rows, std::size_t stride, std::size_t k) {
  if (stride < 3) throw std::invalid_argument("build_knn: stride must be at least 3");
  if (rows.size() % stride) throw std::invalid_argument("build_knn: ragged input");
  const std::size_t n = rows.size() / stride;
  if (k == 0) throw std::invalid_argument("build_knn: k must be positive");
  if (n <= k) {
    throw std::invalid_argument("build_knn: need more than k=" + std::to_string(k) +
                                " points, got " + std::to_string(n));
  }
  return n;
}

inline double dist2(const double* a, const double* b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// Keeps the k smallest candidates as a max-heap on (distance, index).
struct TopK {
  std::size_t k;
  std::vector<Candidate> heap;

  void offer(double d, std::size_t j) {
    const Candidate c{d, j};
    if (heap.size() < k) {
      heap.push_back(c);
      std::push_heap(heap.begin(), heap.end());
    } else if (c < heap.front()) {
      std::pop_heap(heap.begin(), heap.end());
      heap.back() = c;
      std::push_heap(heap.begin(), heap.end());
    }
  }
  bool full() const { return heap.size() == k; }
  double worst() const { return heap.front().first; }
  void emit(std::size_t* out) {
    std::sort_heap(heap.begin(), heap.end());
    for (std::size_t m = 0; m < k; ++m) out[m] = heap[m].second;
  }
};

}  // namespace

KnnGraph build_knn(std::span<const double> rows, std::size_t stride, std::size_t k) {
  const std::size_t n = check_inputs(rows, stride, k);

  std::vector<double> xyz(n * 3);
  double lo[3], hi[3];
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::numeric_limits<double>::infinity();
    hi[a] = -lo[a];
  }
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) {
      const double v = rows[i * stride + static_cast<std::size_t>(a)];
      if (!std::isfinite(v)) throw std::invalid_argument("build_knn: non-finite coordinate");
      xyz[i * 3 + static_cast<std::size_t>(a)] = v;
      lo[a] = std::min(lo[a], v);
      hi[a] = std::max(hi[a], v);
    }

  // Cells sized for roughly k points each on a surface-like cloud.
  double extent = 0.0;
  for (int a = 0; a < 3; ++a) extent = std::max(extent, hi[a] - lo[a]);
  double cell = extent > 0.0 ? extent * std::sqrt(static_cast<double>(k) / static_cast<double>(n))
                             : 1.0;
  std::size_t dims[3];
  for (int a = 0; a < 3; ++a) {
    const double span = hi[a] - lo[a];
    dims[a] = std::min<std::size_t>(64, static_cast<std::size_t>(span / cell) + 1);
  }
  // Cells may be stretched by the cap; the search bound uses the smallest side.
  double side[3];
  double min_side = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    side[a] = std::max(cell, (hi[a] - lo[a]) / static_cast<double>(dims[a]));
    min_side = std::min(min_side, side[a]);
  }
  auto cell_coord = [&](const double* p, int a) {
    const auto c = static_cast<std::size_t>((p[a] - lo[a]) / side[a]);
    return std::min(c, dims[a] - 1);
  };
  const std::size_t total = dims[0] * dims[1] * dims[2];
  std::vector<std::size_t> start(total + 1, 0), order(n);
  std::vector<std::size_t> cell_of(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* p = &xyz[i * 3];
    cell_of[i] = (cell_coord(p, 2) * dims[1] + cell_coord(p, 1)) * dims[0] + cell_coord(p, 0);
    ++start[cell_of[i] + 1];
  }
  for (std::size_t c = 0; c < total; ++c) start[c + 1] += start[c];
  {
    std::vector<std::size_t> fill(start.begin(), start.end() - 1);
    for (std::size_t i = 0; i < n; ++i) order[fill[cell_of[i]]++] = i;
  }
  const std::size_t max_ring = std::max({dims[0], dims[1], dims[2]});

  KnnGraph g;
  g.k = k;
  g.neighbors.resize(n * k);
#pragma omp parallel
  {
    TopK top{k, {}};
    top.heap.reserve(k);
#pragma omp for schedule(dynamic, 64)
    for (std::int64_t qi = 0; qi < static_cast<std::int64_t>(n); ++qi) {
      const auto i = static_cast<std::size_t>(qi);
      const double* q = &xyz[i * 3];
      const auto cx = static_cast<std::int64_t>(cell_coord(q, 0));
      const auto cy = static_cast<std::int64_t>(cell_coord(q, 1));
      const auto cz = static_cast<std::int64_t>(cell_coord(q, 2));
      top.heap.clear();
      for (std::size_t ring = 0; ring <= max_ring; ++ring) {
        const auto r = static_cast<std::int64_t>(ring);
        for (std::int64_t z = cz - r; z <= cz + r; ++z) {
          if (z < 0 || z >= static_cast<std::int64_t>(dims[2])) continue;
          for (std::int64_t y = cy - r; y <= cy + r; ++y) {
            if (y < 0 || y >= static_cast<std::int64_t>(dims[1])) continue;
            const bool y_edge = z == cz - r || z == cz + r || y == cy - r || y == cy + r;
            for (std::int64_t x = cx - r; x <= cx + r; ++x) {
              if (x < 0 || x >= static_cast<std::int64_t>(dims[0])) continue;
              if (!y_edge && x != cx - r && x != cx + r) continue;
              const auto c = static_cast<std::size_t>((z * static_cast<std::int64_t>(dims[1]) + y) *
                                                          static_cast<std::int64_t>(dims[0]) + x);
              for (std::size_t s = start[c]; s < start[c + 1]; ++s) {
                const std::size_t j = order[s];
                if (j != i) top.offer(dist2(q, &xyz[j * 3]), j);
              }
            }
          }
        }
        // Unvisited cells lie at least ring·min_side away (minus rounding slack).
        if (top.full()) {
          const double bound = static_cast<double>(ring) * min_side * (1.0 - 1e-9);
          if (top.worst() < bound * bound) break;
        }
      }
      top.emit(&g.neighbors[i * k]);
    }
  }
  return g;
}

namespace reference {

KnnGraph build_knn(std::span<const double> rows, std::size_t stride, std::size_t k) {
  const std::size_t n = check_inputs(rows, stride, k);
  KnnGraph g;
  g.k = k;
  g.neighbors.resize(n * k);
  std::vector<Candidate> all;
  for (std::size_t i = 0; i < n; ++i) {
    all.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) all.emplace_back(dist2(&rows[i * stride], &rows[j * stride]), j);
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end());
    for (std::size_t m = 0; m < k; ++m) g.neighbors[i * k + m] = all[m].second;
  }
  return g;
}

}  // namespace reference

}  // namespace bevis
