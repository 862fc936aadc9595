#include "bevis/grouping.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>

#include "bevis/kernels.hpp"

namespace bevis {

void MeanShiftConfig::validate() const {
  if (!(bandwidth > 0.0)) throw std::invalid_argument("mean_shift: bandwidth must be positive");
  if (!(mode_merge_radius >= 0.0 && mode_merge_radius <= bandwidth)) {
    throw std::invalid_argument("mean_shift: merge radius must lie in [0, bandwidth]");
  }
  if (max_iters == 0) throw std::invalid_argument("mean_shift: max_iters must be positive");
}

std::vector<int> mean_shift(std::span<const double> features, std::size_t dim,
                            const MeanShiftConfig& config) {
  config.validate();
  if (dim == 0 || features.size() % dim) throw std::invalid_argument("mean_shift: bad shape");
  const std::size_t n = features.size() / dim;
  if (n == 0) throw std::invalid_argument("mean_shift: no points");
  for (double v : features)
    if (!std::isfinite(v)) throw std::invalid_argument("mean_shift: non-finite feature");

  std::vector<double> modes(features.begin(), features.end());
  std::vector<std::size_t> active(n);
  for (std::size_t i = 0; i < n; ++i) active[i] = i;
  std::vector<double> centers, shifted;
  std::vector<std::size_t> counts;
  const double tol2 = config.convergence_tol * config.convergence_tol;
  for (std::size_t iter = 0; iter < config.max_iters && !active.empty(); ++iter) {
    const std::size_t q = active.size();
    centers.resize(q * dim);
    shifted.resize(q * dim);
    counts.resize(q);
    for (std::size_t a = 0; a < q; ++a)
      std::copy_n(&modes[active[a] * dim], dim, &centers[a * dim]);
    kernels::ball_means(features, n, dim, centers, q, config.bandwidth, shifted, counts);
    std::vector<std::size_t> still;
    for (std::size_t a = 0; a < q; ++a) {
      double move = 0.0;
      for (std::size_t t = 0; t < dim; ++t) {
        const double diff = shifted[a * dim + t] - centers[a * dim + t];
        move += diff * diff;
      }
      std::copy_n(&shifted[a * dim], dim, &modes[active[a] * dim]);
      if (move > tol2) still.push_back(active[a]);
    }
    active.swap(still);
  }

  std::vector<int> labels(n);
  std::vector<std::size_t> representatives;  // seed index of each cluster's mode
  const double merge2 = config.mode_merge_radius * config.mode_merge_radius;
  for (std::size_t i = 0; i < n; ++i) {
    int found = -1;
    for (std::size_t c = 0; c < representatives.size() && found < 0; ++c) {
      double d2 = 0.0;
      for (std::size_t t = 0; t < dim; ++t) {
        const double diff = modes[i * dim + t] - modes[representatives[c] * dim + t];
        d2 += diff * diff;
      }
      if (d2 <= merge2) found = static_cast<int>(c);
    }
    if (found < 0) {
      found = static_cast<int>(representatives.size());
      representatives.push_back(i);
    }
    labels[i] = found;
  }
  return labels;
}

std::vector<int> majority_classes(std::span<const int> instances, std::span<const int> semantics,
                                  std::size_t num_classes) {
  if (instances.size() != semantics.size()) {
    throw std::invalid_argument("majority_classes: length mismatch");
  }
  int max_id = -1;
  for (int id : instances) {
    if (id < 0) throw std::invalid_argument("majority_classes: negative instance id");
    max_id = std::max(max_id, id);
  }
  std::vector<std::vector<std::size_t>> votes(static_cast<std::size_t>(max_id + 1),
                                              std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const int s = semantics[i];
    if (s < 0 || static_cast<std::size_t>(s) >= num_classes) {
      throw std::out_of_range("majority_classes: class " + std::to_string(s) + " out of range");
    }
    ++votes[static_cast<std::size_t>(instances[i])][static_cast<std::size_t>(s)];
  }
  std::vector<int> out(votes.size(), -1);
  for (std::size_t id = 0; id < votes.size(); ++id) {
    std::size_t best = 0;
    for (std::size_t c = 0; c < num_classes; ++c)
      if (votes[id][c] > best) {
        best = votes[id][c];
        out[id] = static_cast<int>(c);
      }
  }
  return out;
}

GroupedLabels assign_semantics(std::span<const int> clusters, std::span<const double> logits,
                               std::size_t num_classes) {
  const std::size_t n = clusters.size();
  if (num_classes == 0 || logits.size() != n * num_classes) {
    throw std::invalid_argument("assign_semantics: logits do not match the cluster labels");
  }
  GroupedLabels out;
  out.labeling.instance.assign(clusters.begin(), clusters.end());
  out.labeling.semantic.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &logits[i * num_classes];
    out.labeling.semantic[i] = static_cast<int>(std::max_element(row, row + num_classes) - row);
  }
  out.instance_class = majority_classes(clusters, out.labeling.semantic, num_classes);
  return out;
}

double SplitConfig::threshold(int semantic_class) const {
  const auto c = static_cast<std::size_t>(semantic_class);
  if (semantic_class < 0 || c >= average_size.size() || average_size[c] <= 0.0) {
    return std::numeric_limits<double>::infinity();
  }
  return alpha * average_size[c];
}

std::vector<double> average_instance_sizes(std::span<const PointCloud> clouds,
                                           std::size_t num_classes) {
  std::vector<double> points(num_classes, 0.0), instances(num_classes, 0.0);
  for (const auto& cloud : clouds) {
    if (!cloud.has_labels()) throw std::invalid_argument("average_instance_sizes: unlabelled cloud");
    std::map<int, std::pair<int, std::size_t>> per_instance;  // id → (class, count)
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      auto& e = per_instance[(*cloud.gt_instance)[i]];
      e.first = (*cloud.gt_semantic)[i];
      ++e.second;
    }
    for (const auto& [id, e] : per_instance) {
      const auto c = static_cast<std::size_t>(e.first);
      if (c >= num_classes) throw std::out_of_range("average_instance_sizes: class out of range");
      points[c] += static_cast<double>(e.second);
      instances[c] += 1.0;
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c)
    points[c] = instances[c] > 0.0 ? points[c] / instances[c] : 0.0;
  return points;
}

std::vector<int> split_inconsistent(std::span<const int> instances,
                                    std::span<const int> semantics, const SplitConfig& config) {
  if (!(config.alpha > 0.0)) throw std::invalid_argument("split_inconsistent: alpha must be positive");
  if (instances.size() != semantics.size()) {
    throw std::invalid_argument("split_inconsistent: length mismatch");
  }
  // Per instance: class → count, in ascending instance and class order.
  std::map<int, std::map<int, std::size_t>> counts;
  int next_id = 0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    ++counts[instances[i]][semantics[i]];
    next_id = std::max(next_id, instances[i] + 1);
  }
  // (instance, class) → new id for classes that form their own group.
  std::map<std::pair<int, int>, int> group_id;
  std::map<int, int> leftover_id;
  for (const auto& [id, per_class] : counts) {
    std::vector<std::pair<std::size_t, int>> qualifying;  // (count, class)
    for (const auto& [c, count] : per_class)
      if (static_cast<double>(count) >= config.threshold(c)) qualifying.emplace_back(count, c);
    if (qualifying.size() < 2) continue;
    std::stable_sort(qualifying.begin(), qualifying.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    group_id[{id, qualifying[0].second}] = id;
    leftover_id[id] = id;
    for (std::size_t q = 1; q < qualifying.size(); ++q) group_id[{id, qualifying[q].second}] = next_id++;
  }
  std::vector<int> out(instances.begin(), instances.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!leftover_id.count(instances[i])) continue;
    auto it = group_id.find({instances[i], semantics[i]});
    out[i] = it != group_id.end() ? it->second : leftover_id[instances[i]];
  }
  return out;
}

}  // namespace bevis

namespace bevis {

void ConnectivityConfig::validate() const {
  if (!(radius >= 0.0) || !std::isfinite(radius)) {
    throw std::invalid_argument("connectivity: radius must be finite and non-negative");
  }
}

namespace {

struct DisjointSet {
  std::vector<std::size_t> parent;
  explicit DisjointSet(std::size_t n) : parent(n) {
    for (std::size_t i = 0; i < n; ++i) parent[i] = i;
  }
  std::size_t find(std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

// Connected pieces of `members` (positions into `rows`), each sorted.
std::vector<std::vector<std::size_t>> pieces_of(std::span<const double> rows, std::size_t stride,
                                                const std::vector<std::size_t>& members,
                                                double radius) {
  const std::size_t m = members.size();
  auto coord = [&](std::size_t local, std::size_t axis) { return rows[members[local] * stride + axis]; };
  using Key = std::array<std::int64_t, 3>;
  std::map<Key, std::vector<std::size_t>> grid;
  auto key_of = [&](std::size_t local) {
    Key k;
    for (std::size_t a = 0; a < 3; ++a) k[a] = static_cast<std::int64_t>(std::floor(coord(local, a) / radius));
    return k;
  };
  for (std::size_t i = 0; i < m; ++i) grid[key_of(i)].push_back(i);
  DisjointSet sets(m);
  const double r2 = radius * radius;
  for (std::size_t i = 0; i < m; ++i) {
    const Key k = key_of(i);
    for (std::int64_t dx = -1; dx <= 1; ++dx)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          const auto it = grid.find({k[0] + dx, k[1] + dy, k[2] + dz});
          if (it == grid.end()) continue;
          for (std::size_t j : it->second) {
            if (j <= i) continue;
            double d2 = 0.0;
            for (std::size_t a = 0; a < 3; ++a) d2 += (coord(i, a) - coord(j, a)) * (coord(i, a) - coord(j, a));
            if (d2 <= r2) sets.unite(i, j);
          }
        }
  }
  std::map<std::size_t, std::vector<std::size_t>> by_root;
  for (std::size_t i = 0; i < m; ++i) by_root[sets.find(i)].push_back(members[i]);
  std::vector<std::vector<std::size_t>> out;
  for (auto& [root, pts] : by_root) out.push_back(std::move(pts));
  // Largest first; equal sizes by their first point.
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.size() > b.size(); });
  return out;
}

}  // namespace

std::vector<int> split_disconnected(std::span<const double> rows, std::size_t stride,
                                    std::span<const int> instances,
                                    const ConnectivityConfig& config) {
  config.validate();
  if (stride < 3 || rows.size() != instances.size() * stride) {
    throw std::invalid_argument("split_disconnected: rows do not match the labelling");
  }
  std::vector<int> out(instances.begin(), instances.end());
  if (config.radius == 0.0) return out;
  std::map<int, std::vector<std::size_t>> members;
  int next_id = 0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    members[instances[i]].push_back(i);
    next_id = std::max(next_id, instances[i] + 1);
  }
  for (auto& [id, pts] : members) {
    auto pieces = pieces_of(rows, stride, pts, config.radius);
    std::size_t large = 0;
    while (large < pieces.size() && pieces[large].size() >= config.min_points) ++large;
    if (large < 2) continue;
    for (std::size_t p = 1; p < large; ++p) {
      for (std::size_t i : pieces[p]) out[i] = next_id;
      ++next_id;
    }
    for (std::size_t p = large; p < pieces.size(); ++p) {
      // A small piece follows the large piece closest to its first point.
      const std::size_t probe = pieces[p].front();
      double best = std::numeric_limits<double>::infinity();
      int label = id;
      for (std::size_t q = 0; q < large; ++q)
        for (std::size_t j : pieces[q]) {
          double d2 = 0.0;
          for (std::size_t a = 0; a < 3; ++a) {
            const double d = rows[probe * stride + a] - rows[j * stride + a];
            d2 += d * d;
          }
          if (d2 < best) {
            best = d2;
            label = out[j];
          }
        }
      for (std::size_t i : pieces[p]) out[i] = label;
    }
  }
  return out;
}

}  // namespace bevis
