#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bevis {

/// x, y, z | r, g, b | nx, ny, nz
inline constexpr std::size_t kPointFeatures = 9;

enum SemanticClass : int {
  kFloor = 0,
  kWall = 1,
  kCeiling = 2,
  kTable = 3,
  kChair = 4,
  kSofa = 5,
  kBoard = 6,
  kClutter = 7,
};
inline constexpr std::size_t kNumClasses = 8;

std::string_view class_name(int semantic_class);
/// Inverse of class_name; throws on unknown names.
int class_from_name(std::string_view name);

struct PointCloud {
  std::vector<double> points;  // N × kPointFeatures, row-major
  std::optional<std::vector<int>> gt_semantic;
  std::optional<std::vector<int>> gt_instance;

  std::size_t size() const { return points.size() / kPointFeatures; }
  bool has_labels() const { return gt_semantic.has_value() && gt_instance.has_value(); }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(points).subspan(i * kPointFeatures, kPointFeatures);
  }
  double x(std::size_t i) const { return points[i * kPointFeatures]; }
  double y(std::size_t i) const { return points[i * kPointFeatures + 1]; }
  double z(std::size_t i) const { return points[i * kPointFeatures + 2]; }

  /// Checks the layout, normalized-channel range and label consistency
  /// (every instance maps to one semantic class). Throws on violation.
  void validate() const;

  /// Subset with rows in the given order (labels carried along).
  PointCloud select(std::span<const std::size_t> indices) const;

  friend bool operator==(const PointCloud&, const PointCloud&) = default;
};

struct Labeling {
  std::vector<int> semantic;
  std::vector<int> instance;
};

/// Relabels instance IDs to 0..I−1 in order of first appearance.
std::vector<int> canonicalize_instances(std::span<const int> instance_ids);

struct RoomBounds {
  std::array<double, 3> min{};
  std::array<double, 3> max{};
};

/// Axis-aligned bounds of the xyz columns of a row-major matrix with `stride`.
RoomBounds bounds_of(std::span<const double> rows, std::size_t stride);

/// Appends (p − min) / (max − min) per axis to N×6 xyzrgb rows.
PointCloud featurize(std::span<const double> xyzrgb, const RoomBounds& bounds);

struct SceneSpec {
  double width = 4.0;   // x extent, meters
  double depth = 4.0;   // y extent
  double height = 2.5;  // z extent
  std::size_t num_objects = 3;
  std::vector<int> palette{kTable, kChair, kSofa, kBoard, kClutter};
  std::uint64_t seed = 0;
  bool ceiling = true;
  double density = 400.0;  // points per square meter of surface
  double position_noise = 0.005;
  double color_noise = 0.02;
  double object_clearance = 0.3;

  void validate() const;
};

/// Parses `key = value` lines ('#' comments) into a spec, starting from defaults.
SceneSpec parse_scene_spec(std::string_view text);
std::string format_scene_spec(const SceneSpec& spec);

/// Synthetic room: floor, four walls, optional ceiling and `num_objects`
/// axis-aligned boxes with class colors. Instance IDs: floor 0, walls 1–4,
/// ceiling 5 when present, then objects. Deterministic in the seed.
PointCloud generate_scene(const SceneSpec& spec);

/// Instance count by construction: 5 structural (+1 with ceiling) + objects.
std::size_t expected_instance_count(const SceneSpec& spec);

}  // namespace bevis
