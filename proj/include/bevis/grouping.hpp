#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bevis/scene.hpp"

namespace bevis {

struct MeanShiftConfig {
  double bandwidth = 1.0;
  std::size_t max_iters = 100;
  double convergence_tol = 1e-6;
  double mode_merge_radius = 0.5;

  void validate() const;
};

/// Flat-kernel mean-shift seeded from every point. Modes are merged in seed
/// order: a seed joins the first earlier mode within mode_merge_radius.
/// Returns cluster ids 0..C−1 in order of first appearance.
std::vector<int> mean_shift(std::span<const double> features, std::size_t dim,
                            const MeanShiftConfig& config);

struct GroupedLabels {
  Labeling labeling;                // per-point argmax class and cluster id
  std::vector<int> instance_class;  // majority class of each cluster id
};

/// Ties in the argmax and the majority vote go to the lower class id.
GroupedLabels assign_semantics(std::span<const int> clusters, std::span<const double> logits,
                               std::size_t num_classes);

/// Majority class per instance id (ids must be non-negative); ties to the
/// lower class.
std::vector<int> majority_classes(std::span<const int> instances, std::span<const int> semantics,
                                  std::size_t num_classes);

struct SplitConfig {
  double alpha = 0.25;
  /// Average number of points per instance of each class in training data;
  /// zero marks a class never seen, which never spawns an instance.
  std::vector<double> average_size;

  double threshold(int semantic_class) const;
};

/// Average point count per GT instance of each class over labelled clouds.
std::vector<double> average_instance_sizes(std::span<const PointCloud> clouds,
                                           std::size_t num_classes);

/// Within each instance, every class with at least alpha × average_size
/// points becomes its own instance when two or more classes qualify; points
/// of the other classes stay with the largest qualifying class. The largest
/// group keeps the original id, the others get fresh ids.
std::vector<int> split_inconsistent(std::span<const int> instances,
                                    std::span<const int> semantics, const SplitConfig& config);

struct ConnectivityConfig {
  double radius = 0.15;          // meters; zero disables the split
  std::size_t min_points = 20;  // smaller pieces rejoin their nearest large piece

  void validate() const;
};

/// Splits every instance into groups of points linked by chains of xyz
/// steps no longer than radius. Pieces with at least min_points become
/// instances (the largest keeps the id, the others get fresh ids); smaller
/// pieces join the large piece holding their nearest point.
std::vector<int> split_disconnected(std::span<const double> rows, std::size_t stride,
                                    std::span<const int> instances,
                                    const ConnectivityConfig& config);

}  // namespace bevis
