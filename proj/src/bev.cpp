#include "bevis/bev.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "bevis/checkpoint.hpp"
#include "bevis/losses.hpp"
#include "bevis/rng.hpp"

namespace bevis {

namespace {

/// Builds a (rows × cols) view whose cell (r, c) copies cell src(r, c) of
/// `view`; src returns nullopt for padding.
template <typename SourceOf>
BirdsEyeView remap_cells(const BirdsEyeView& view, std::size_t rows, std::size_t cols,
                         SourceOf src) {
  BirdsEyeView out;
  out.height = rows;
  out.width = cols;
  out.cell_size = view.cell_size;
  out.origin = view.origin;
  out.ground_z = view.ground_z;
  out.channels.assign(rows * cols * kBevChannels, 0.0);
  out.valid.assign(rows * cols, 0);
  out.index_map.assign(rows * cols, kNoPoint);
  if (view.has_gt()) {
    out.gt_semantic.assign(rows * cols, kIgnoreLabel);
    out.gt_instance.assign(rows * cols, kIgnoreLabel);
  }
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::optional<std::size_t> s = src(r, c);
      if (!s) continue;
      const std::size_t d = r * cols + c;
      std::copy_n(view.channels.begin() + static_cast<std::ptrdiff_t>(*s * kBevChannels),
                  kBevChannels, out.channels.begin() + static_cast<std::ptrdiff_t>(d * kBevChannels));
      out.valid[d] = view.valid[*s];
      out.index_map[d] = view.index_map[*s];
      if (view.has_gt()) {
        out.gt_semantic[d] = view.gt_semantic[*s];
        out.gt_instance[d] = view.gt_instance[*s];
      }
    }
  return out;
}

}  // namespace

std::size_t BirdsEyeView::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

void BirdsEyeView::validate() const {
  const std::size_t n = cells();
  if (channels.size() != n * kBevChannels || valid.size() != n || index_map.size() != n) {
    throw std::invalid_argument("bev: raster layer sizes disagree with " + std::to_string(height) +
                                "x" + std::to_string(width));
  }
  if (has_gt() && (gt_semantic.size() != n || gt_instance.size() != n)) {
    throw std::invalid_argument("bev: GT raster size mismatch");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if ((valid[i] != 0) != (index_map[i] != kNoPoint)) {
      throw std::invalid_argument("bev: validity and index map disagree at cell " + std::to_string(i));
    }
    if (valid[i] && channels[i * kBevChannels + 3] < 0.0) {
      throw std::invalid_argument("bev: negative height at cell " + std::to_string(i));
    }
  }
}

double percentile_z(const PointCloud& cloud, double percentile) {
  const std::size_t n = cloud.size();
  if (n == 0) return 0.0;
  std::vector<double> z(n);
  for (std::size_t i = 0; i < n; ++i) z[i] = cloud.z(i);
  const auto rank = static_cast<std::size_t>(
      std::floor(std::clamp(percentile, 0.0, 1.0) * static_cast<double>(n - 1)));
  std::nth_element(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(rank), z.end());
  return z[rank];
}

CeilingCut remove_ceiling(const PointCloud& cloud, double ceiling_fraction,
                          double ground_percentile) {
  CeilingCut out;
  const std::size_t n = cloud.size();
  if (n == 0) {
    out.cloud = cloud;
    return out;
  }
  const double ground = percentile_z(cloud, ground_percentile);
  double top = cloud.z(0);
  for (std::size_t i = 1; i < n; ++i) top = std::max(top, cloud.z(i));
  out.z_cut = ground + ceiling_fraction * (top - ground);
  for (std::size_t i = 0; i < n; ++i)
    if (cloud.z(i) <= out.z_cut) out.source_index.push_back(i);
  out.cloud = cloud.select(out.source_index);
  return out;
}

BirdsEyeView rasterize(const PointCloud& cloud, const RasterConfig& config) {
  if (!(config.cell_size > 0.0)) throw std::invalid_argument("rasterize: cell size must be positive");
  BirdsEyeView view;
  view.cell_size = config.cell_size;
  const std::size_t n = cloud.size();
  const bool with_gt = cloud.has_labels();
  if (n == 0) {
    view.height = view.width = 1;
    view.channels.assign(kBevChannels, 0.0);
    view.valid.assign(1, 0);
    view.index_map.assign(1, kNoPoint);
    if (with_gt) {
      view.gt_semantic.assign(1, kIgnoreLabel);
      view.gt_instance.assign(1, kIgnoreLabel);
    }
    return view;
  }

  double min_x = cloud.x(0), max_x = min_x, min_y = cloud.y(0), max_y = min_y;
  for (std::size_t i = 1; i < n; ++i) {
    min_x = std::min(min_x, cloud.x(i));
    max_x = std::max(max_x, cloud.x(i));
    min_y = std::min(min_y, cloud.y(i));
    max_y = std::max(max_y, cloud.y(i));
  }
  const double rows_f = std::floor((max_y - min_y) / config.cell_size) + 1.0;
  const double cols_f = std::floor((max_x - min_x) / config.cell_size) + 1.0;
  if (rows_f > static_cast<double>(config.max_dim) || cols_f > static_cast<double>(config.max_dim)) {
    throw std::invalid_argument("rasterize: grid " + std::to_string(static_cast<long>(rows_f)) + "x" +
                                std::to_string(static_cast<long>(cols_f)) + " exceeds max dimension " +
                                std::to_string(config.max_dim));
  }
  view.height = static_cast<std::size_t>(rows_f);
  view.width = static_cast<std::size_t>(cols_f);
  view.origin = {min_x, min_y};
  view.ground_z = config.ground_z ? *config.ground_z : percentile_z(cloud, config.ground_percentile);

  const std::size_t cells = view.cells();
  view.channels.assign(cells * kBevChannels, 0.0);
  view.valid.assign(cells, 0);
  view.index_map.assign(cells, kNoPoint);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = std::min(view.height - 1,
                            static_cast<std::size_t>((cloud.y(i) - min_y) / config.cell_size));
    const auto c = std::min(view.width - 1,
                            static_cast<std::size_t>((cloud.x(i) - min_x) / config.cell_size));
    const std::size_t cell = r * view.width + c;
    auto& winner = view.index_map[cell];
    // Points are visited in index order, so only a strictly higher z replaces.
    if (winner == kNoPoint || cloud.z(i) > cloud.z(static_cast<std::size_t>(winner))) {
      winner = static_cast<std::int64_t>(i);
    }
  }
  if (with_gt) {
    view.gt_semantic.assign(cells, kIgnoreLabel);
    view.gt_instance.assign(cells, kIgnoreLabel);
  }
  for (std::size_t cell = 0; cell < cells; ++cell) {
    if (view.index_map[cell] == kNoPoint) continue;
    const auto p = static_cast<std::size_t>(view.index_map[cell]);
    view.valid[cell] = 1;
    const auto row = cloud.row(p);
    double* ch = view.channels.data() + cell * kBevChannels;
    ch[0] = row[3];
    ch[1] = row[4];
    ch[2] = row[5];
    ch[3] = std::max(0.0, row[2] - view.ground_z);
    if (with_gt) {
      view.gt_semantic[cell] = (*cloud.gt_semantic)[p];
      view.gt_instance[cell] = (*cloud.gt_instance)[p];
    }
  }
  return view;
}

void remap_indices(BirdsEyeView& view, std::span<const std::size_t> source_index) {
  for (auto& idx : view.index_map) {
    if (idx == kNoPoint) continue;
    if (static_cast<std::size_t>(idx) >= source_index.size()) {
      throw std::out_of_range("remap_indices: index " + std::to_string(idx) + " outside map");
    }
    idx = static_cast<std::int64_t>(source_index[static_cast<std::size_t>(idx)]);
  }
}

PointFeatures unproject(const BirdsEyeView& view, std::span<const double> pixel_features,
                        std::size_t dim, std::size_t num_points) {
  if (pixel_features.size() != view.cells() * dim) {
    throw ShapeError("unproject: feature map holds " + std::to_string(pixel_features.size()) +
                     " values, expected " + std::to_string(view.height) + "x" +
                     std::to_string(view.width) + "x" + std::to_string(dim));
  }
  PointFeatures out;
  out.dim = dim;
  out.values.assign(num_points * dim, 0.0);
  out.assigned.assign(num_points, 0);
  for (std::size_t cell = 0; cell < view.cells(); ++cell) {
    if (!view.valid[cell]) continue;
    const auto p = static_cast<std::size_t>(view.index_map[cell]);
    if (p >= num_points) throw std::out_of_range("unproject: point index beyond cloud size");
    std::copy_n(pixel_features.begin() + static_cast<std::ptrdiff_t>(cell * dim), dim,
                out.values.begin() + static_cast<std::ptrdiff_t>(p * dim));
    out.assigned[p] = 1;
  }
  return out;
}

BirdsEyeView rotate90(const BirdsEyeView& view) {
  const std::size_t h = view.height, w = view.width;
  return remap_cells(view, w, h, [&](std::size_t r, std::size_t c) -> std::optional<std::size_t> {
    return c * w + (w - 1 - r);
  });
}

BirdsEyeView flip_horizontal(const BirdsEyeView& view) {
  const std::size_t w = view.width;
  return remap_cells(view, view.height, w, [&](std::size_t r, std::size_t c) -> std::optional<std::size_t> {
    return r * w + (w - 1 - c);
  });
}

BirdsEyeView flip_vertical(const BirdsEyeView& view) {
  const std::size_t h = view.height, w = view.width;
  return remap_cells(view, h, w, [&](std::size_t r, std::size_t c) -> std::optional<std::size_t> {
    return (h - 1 - r) * w + c;
  });
}

BirdsEyeView rescale(const BirdsEyeView& view, double scale) {
  if (!(scale > 0.0)) throw std::invalid_argument("rescale: scale must be positive");
  if (scale == 1.0) return view;
  const std::size_t h = view.height, w = view.width;
  const auto rows = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(h) * scale)));
  const auto cols = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(w) * scale)));
  auto out = remap_cells(view, rows, cols, [&](std::size_t r, std::size_t c) -> std::optional<std::size_t> {
    const auto sr = std::min(h - 1, static_cast<std::size_t>((static_cast<double>(r) + 0.5) / scale));
    const auto sc = std::min(w - 1, static_cast<std::size_t>((static_cast<double>(c) + 0.5) / scale));
    return sr * w + sc;
  });
  out.cell_size = view.cell_size / scale;
  for (std::size_t cell = 0; cell < out.cells(); ++cell)
    if (out.valid[cell]) out.channels[cell * kBevChannels + 3] *= scale;
  return out;
}

Augmentation draw_augmentation(std::uint64_t seed, double min_scale, double max_scale) {
  Rng rng(derive_seed(seed, 11));
  Augmentation aug;
  aug.quarter_turns = static_cast<int>(uniform_index(rng, 4));
  aug.flip_horizontal = uniform01(rng) < 0.5;
  aug.flip_vertical = uniform01(rng) < 0.5;
  aug.scale = uniform(rng, min_scale, max_scale);
  return aug;
}

BirdsEyeView apply_augmentation(const BirdsEyeView& view, const Augmentation& aug) {
  BirdsEyeView out = view;
  for (int t = 0; t < ((aug.quarter_turns % 4) + 4) % 4; ++t) out = rotate90(out);
  if (aug.flip_horizontal) out = flip_horizontal(out);
  if (aug.flip_vertical) out = flip_vertical(out);
  return rescale(out, aug.scale);
}

BirdsEyeView augment(const BirdsEyeView& view, std::uint64_t seed) {
  return apply_augmentation(view, draw_augmentation(seed));
}

BirdsEyeView crop(const BirdsEyeView& view, std::size_t row0, std::size_t col0, std::size_t rows,
                  std::size_t cols) {
  if (row0 + rows > view.height || col0 + cols > view.width) {
    throw std::out_of_range("crop window exceeds the view");
  }
  const std::size_t w = view.width;
  auto out = remap_cells(view, rows, cols, [&](std::size_t r, std::size_t c) -> std::optional<std::size_t> {
    return (row0 + r) * w + (col0 + c);
  });
  out.origin = {view.origin[0] + static_cast<double>(col0) * view.cell_size,
                view.origin[1] + static_cast<double>(row0) * view.cell_size};
  return out;
}

BirdsEyeView pad_to_multiple(const BirdsEyeView& view, std::size_t multiple) {
  if (multiple == 0) throw std::invalid_argument("pad_to_multiple: multiple must be positive");
  auto round_up = [&](std::size_t v) { return std::max(multiple, (v + multiple - 1) / multiple * multiple); };
  const std::size_t rows = round_up(view.height), cols = round_up(view.width);
  const std::size_t h = view.height, w = view.width;
  return remap_cells(view, rows, cols, [&](std::size_t r, std::size_t c) -> std::optional<std::size_t> {
    if (r >= h || c >= w) return std::nullopt;
    return r * w + c;
  });
}

Tensor view_tensor(const BirdsEyeView& view) {
  return Tensor({view.height, view.width, kBevChannels}, view.channels);
}

std::vector<NamedTensor> bev_records(const BirdsEyeView& view, const std::string& prefix) {
  const Shape grid{view.height, view.width};
  auto as_doubles = [](const auto& v) { return std::vector<double>(v.begin(), v.end()); };
  std::vector<NamedTensor> out{
      {prefix + "/channels", Tensor({view.height, view.width, kBevChannels}, view.channels)},
      {prefix + "/valid", Tensor(grid, as_doubles(view.valid))},
      {prefix + "/index_map", Tensor(grid, as_doubles(view.index_map))},
      {prefix + "/geometry", Tensor({4}, {view.cell_size, view.origin[0], view.origin[1], view.ground_z})},
  };
  if (view.has_gt()) {
    out.push_back({prefix + "/gt_semantic", Tensor(grid, as_doubles(view.gt_semantic))});
    out.push_back({prefix + "/gt_instance", Tensor(grid, as_doubles(view.gt_instance))});
  }
  return out;
}

BirdsEyeView bev_from_records(std::span<const NamedTensor> records, const std::string& prefix) {
  BirdsEyeView view;
  const Tensor& channels = find_record(records, prefix + "/channels");
  if (channels.rank() != 3 || channels.dim(2) != kBevChannels) {
    throw ShapeError("bev record channels have shape " + shape_string(channels.shape()));
  }
  view.height = channels.dim(0);
  view.width = channels.dim(1);
  view.channels.assign(channels.data().begin(), channels.data().end());
  const auto& geometry = find_record(records, prefix + "/geometry").data();
  view.cell_size = geometry[0];
  view.origin = {geometry[1], geometry[2]};
  view.ground_z = geometry[3];
  for (double v : find_record(records, prefix + "/valid").data()) view.valid.push_back(static_cast<std::uint8_t>(v));
  for (double v : find_record(records, prefix + "/index_map").data())
    view.index_map.push_back(static_cast<std::int64_t>(v));
  const bool has_gt = std::any_of(records.begin(), records.end(),
                                  [&](const NamedTensor& r) { return r.name == prefix + "/gt_instance"; });
  if (has_gt) {
    for (double v : find_record(records, prefix + "/gt_semantic").data()) view.gt_semantic.push_back(static_cast<int>(v));
    for (double v : find_record(records, prefix + "/gt_instance").data()) view.gt_instance.push_back(static_cast<int>(v));
  }
  view.validate();
  return view;
}

}  // namespace bevis
