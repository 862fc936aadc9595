#pragma once

#include <cstddef>
#include <vector>

namespace bevis::testing {

/// Sorts every other point by (squared distance, index) and keeps k.
std::vector<std::size_t> brute_force_knn(const std::vector<double>& xyz, std::size_t k);

/// Flat-kernel mean-shift written out directly: every seed walks to its
/// mode, then seeds join the first earlier mode within merge_radius.
std::vector<int> hand_mean_shift(const std::vector<double>& features, std::size_t dim,
                                 double bandwidth, double merge_radius,
                                 std::size_t max_iters = 100, double tol = 1e-6);

/// Instance labelling of a small scene for the AP oracle.
struct ToyInstances {
  std::vector<int> point_instance;  // -1 for unlabelled points
  std::vector<int> instance_class;
  std::vector<double> confidence;   // predictions only
};

struct ToyApResult {
  std::vector<bool> hits;         // per prediction
  std::vector<double> class_ap;   // NaN for classes without GT
};

/// Greedy matching plus precision/recall area computed from raw point counts.
ToyApResult toy_average_precision(const ToyInstances& pred, const ToyInstances& gt,
                                  std::size_t num_points, std::size_t num_classes,
                                  double threshold);

/// Largest number of same-class pairs with IoU ≥ threshold over all one-to-one
/// assignments (exhaustive search).
std::size_t optimal_matches(const ToyInstances& pred, const ToyInstances& gt,
                            std::size_t num_points, double threshold);

}  // namespace bevis::testing
