#pragma once

// "BEVPC1" point-cloud container, little-endian:
//   magic "BEVPC1" | u64 N | u32 F | u32 flags
//   [u32 D if kHasInstanceFeatures] [u32 K if kHasLogits]
//   f64 points[N×F]
//   [i32 semantic[N]] [i32 instance[N]] [f64 features[N×D]] [f64 logits[N×K]]

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bevis/binary_io.hpp"
#include "bevis/scene.hpp"

namespace bevis {

inline constexpr std::string_view kCloudMagic = "BEVPC1";

enum CloudFlags : std::uint32_t {
  kHasSemantic = 1u << 0,
  kHasInstance = 1u << 1,
  kHasInstanceFeatures = 1u << 2,
  kHasLogits = 1u << 3,
};

/// Optional per-point prediction channels stored with a cloud.
struct CloudExtras {
  std::size_t feature_dim = 0;
  std::vector<double> features;  // N × feature_dim
  std::size_t num_logits = 0;
  std::vector<double> logits;  // N × num_logits

  friend bool operator==(const CloudExtras&, const CloudExtras&) = default;
};

struct CloudFile {
  PointCloud cloud;
  CloudExtras extras;
};

std::vector<unsigned char> encode_cloud(const PointCloud& cloud, const CloudExtras& extras = {});
CloudFile decode_cloud(std::span<const unsigned char> bytes);

void save_cloud(const std::filesystem::path& path, const PointCloud& cloud,
                const CloudExtras& extras = {});
CloudFile load_cloud(const std::filesystem::path& path);

}  // namespace bevis
