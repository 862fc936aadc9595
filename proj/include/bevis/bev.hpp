#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "bevis/layers.hpp"
#include "bevis/scene.hpp"
#include "bevis/tensor.hpp"

namespace bevis {

/// r, g, b, height above ground
inline constexpr std::size_t kBevChannels = 4;
inline constexpr std::int64_t kNoPoint = -1;

/// Top-down raster. Row index follows y, column index follows x.
struct BirdsEyeView {
  std::size_t height = 0;  // rows
  std::size_t width = 0;   // columns
  std::vector<double> channels;        // height × width × kBevChannels
  std::vector<std::uint8_t> valid;     // height × width
  std::vector<std::int64_t> index_map; // point index or kNoPoint
  double cell_size = 0.0;
  std::array<double, 2> origin{};  // world xy of the corner of cell (0, 0)
  double ground_z = 0.0;
  // Empty when the source cloud carries no labels; kIgnoreLabel on invalid cells.
  std::vector<int> gt_semantic;
  std::vector<int> gt_instance;

  std::size_t cells() const { return height * width; }
  bool has_gt() const { return !gt_instance.empty(); }
  std::size_t valid_count() const;
  /// Throws if the mask, index map and GT rasters are inconsistent.
  void validate() const;

  friend bool operator==(const BirdsEyeView&, const BirdsEyeView&) = default;
};

struct RasterConfig {
  double cell_size = 0.03;
  std::size_t max_dim = 4096;
  double ground_percentile = 0.01;
  /// Overrides the percentile ground estimate when set.
  std::optional<double> ground_z;
};

/// z value at the given percentile (nearest rank, lower).
double percentile_z(const PointCloud& cloud, double percentile);

struct CeilingCut {
  PointCloud cloud;
  std::vector<std::size_t> source_index;  // row in the input cloud of each kept point
  double z_cut = 0.0;
};

/// Drops points above ground + fraction × (top − ground).
CeilingCut remove_ceiling(const PointCloud& cloud, double ceiling_fraction = 0.9,
                          double ground_percentile = 0.01);

/// Keeps the highest point per cell (ties: lowest point index).
BirdsEyeView rasterize(const PointCloud& cloud, const RasterConfig& config);

/// Rewrites index_map through `source_index` (e.g. back to the pre-cut cloud).
void remap_indices(BirdsEyeView& view, std::span<const std::size_t> source_index);

struct PointFeatures {
  std::size_t dim = 0;
  std::vector<double> values;         // num_points × dim, zero where unassigned
  std::vector<std::uint8_t> assigned; // num_points
};

/// Copies each valid cell's feature vector to its indexed point.
PointFeatures unproject(const BirdsEyeView& view, std::span<const double> pixel_features,
                        std::size_t dim, std::size_t num_points);

struct Augmentation {
  int quarter_turns = 0;  // counter-clockwise
  bool flip_horizontal = false;
  bool flip_vertical = false;
  double scale = 1.0;
};

Augmentation draw_augmentation(std::uint64_t seed, double min_scale = 0.9, double max_scale = 1.1);
BirdsEyeView apply_augmentation(const BirdsEyeView& view, const Augmentation& aug);
/// Random quarter-turn rotation, flips and scaling in [0.9, 1.1].
BirdsEyeView augment(const BirdsEyeView& view, std::uint64_t seed);

BirdsEyeView rotate90(const BirdsEyeView& view);
BirdsEyeView flip_horizontal(const BirdsEyeView& view);
BirdsEyeView flip_vertical(const BirdsEyeView& view);
/// Nearest-neighbour resampling; the height channel is multiplied by `scale`.
BirdsEyeView rescale(const BirdsEyeView& view, double scale);

BirdsEyeView crop(const BirdsEyeView& view, std::size_t row0, std::size_t col0, std::size_t rows,
                  std::size_t cols);
/// Pads bottom/right with invalid cells up to the next multiple.
BirdsEyeView pad_to_multiple(const BirdsEyeView& view, std::size_t multiple);

/// Network input tensor [H, W, kBevChannels].
Tensor view_tensor(const BirdsEyeView& view);

std::vector<NamedTensor> bev_records(const BirdsEyeView& view, const std::string& prefix);
BirdsEyeView bev_from_records(std::span<const NamedTensor> records, const std::string& prefix);

}  // namespace bevis
