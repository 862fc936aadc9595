#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bevis/bev.hpp"

namespace bevis {

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // height × width × 3, top row first

  friend bool operator==(const Image&, const Image&) = default;
};

std::vector<unsigned char> encode_ppm(const Image& image);
Image decode_ppm(std::span<const unsigned char> bytes);
void write_ppm(const std::filesystem::path& path, const Image& image);

// Raster renders put larger y at the top. Invalid cells are black.

Image render_bev_colors(const BirdsEyeView& view);
/// One fixed palette colour per id; negative ids render black.
Image render_labels(const BirdsEyeView& view, std::span<const int> cell_labels);
/// First three principal components of the valid cells' features, each
/// stretched to [0, 255]. Components without variance render mid-grey.
Image render_pca(const BirdsEyeView& view, std::span<const double> cell_features,
                 std::size_t dim);

std::array<std::uint8_t, 3> palette_color(int id);

}  // namespace bevis
