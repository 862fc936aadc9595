#include "bevis/scene.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "bevis/config.hpp"
#include "bevis/rng.hpp"

namespace bevis {

namespace {

constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "floor", "wall", "ceiling", "table", "chair", "sofa", "board", "clutter"};

constexpr std::array<std::array<double, 3>, kNumClasses> kClassColors = {{
    {0.55, 0.45, 0.35},  // floor
    {0.85, 0.85, 0.80},  // wall
    {0.95, 0.95, 0.95},  // ceiling
    {0.60, 0.35, 0.15},  // table
    {0.80, 0.15, 0.15},  // chair
    {0.20, 0.30, 0.75},  // sofa
    {0.15, 0.60, 0.25},  // board
    {0.85, 0.75, 0.20},  // clutter
}};

struct Box {
  int cls;
  double x0, y0, z0, x1, y1, z1;
};

struct SceneBuilder {
  const SceneSpec& spec;
  Rng rng;
  std::vector<double> xyzrgb;
  std::vector<int> semantic;
  std::vector<int> instance;

  void add_point(double x, double y, double z, int cls, int inst) {
    const auto& c = kClassColors[static_cast<std::size_t>(cls)];
    xyzrgb.push_back(x + normal(rng, 0.0, spec.position_noise));
    xyzrgb.push_back(y + normal(rng, 0.0, spec.position_noise));
    xyzrgb.push_back(z + normal(rng, 0.0, spec.position_noise));
    for (double base : c) xyzrgb.push_back(std::clamp(base + normal(rng, 0.0, spec.color_noise), 0.0, 1.0));
    semantic.push_back(cls);
    instance.push_back(inst);
  }

  std::size_t count_for(double area) const {
    return static_cast<std::size_t>(std::llround(area * spec.density));
  }

  /// Uniform samples on the rectangle origin + a·u + b·v, a, b ∈ [0, 1].
  template <typename Keep>
  void rect(std::array<double, 3> o, std::array<double, 3> u, std::array<double, 3> v, int cls,
            int inst, Keep keep) {
    const double area = std::hypot(u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2],
                                   u[0] * v[1] - u[1] * v[0]);
    const std::size_t n = count_for(area);
    for (std::size_t i = 0; i < n; ++i) {
      const double a = uniform01(rng);
      const double b = uniform01(rng);
      const double x = o[0] + a * u[0] + b * v[0];
      const double y = o[1] + a * u[1] + b * v[1];
      const double z = o[2] + a * u[2] + b * v[2];
      if (keep(x, y, z)) add_point(x, y, z, cls, inst);
    }
  }

  void rect(std::array<double, 3> o, std::array<double, 3> u, std::array<double, 3> v, int cls,
            int inst) {
    rect(o, u, v, cls, inst, [](double, double, double) { return true; });
  }

  void box(const Box& b, int inst) {
    const double dx = b.x1 - b.x0, dy = b.y1 - b.y0, dz = b.z1 - b.z0;
    rect({b.x0, b.y0, b.z1}, {dx, 0, 0}, {0, dy, 0}, b.cls, inst);  // top
    if (b.z0 > 0.0) rect({b.x0, b.y0, b.z0}, {dx, 0, 0}, {0, dy, 0}, b.cls, inst);
    rect({b.x0, b.y0, b.z0}, {dx, 0, 0}, {0, 0, dz}, b.cls, inst);
    rect({b.x0, b.y1, b.z0}, {dx, 0, 0}, {0, 0, dz}, b.cls, inst);
    rect({b.x0, b.y0, b.z0}, {0, dy, 0}, {0, 0, dz}, b.cls, inst);
    rect({b.x1, b.y0, b.z0}, {0, dy, 0}, {0, 0, dz}, b.cls, inst);
  }
};

bool footprints_overlap(const Box& a, const Box& b, double clearance) {
  return a.x0 - clearance < b.x1 && b.x0 - clearance < a.x1 && a.y0 - clearance < b.y1 &&
         b.y0 - clearance < a.y1;
}

Box propose_object(int cls, const SceneSpec& spec, Rng& rng) {
  constexpr double kMargin = 0.25;
  double sx = 0, sy = 0, sz = 0, z0 = 0;
  switch (cls) {
    case kTable: sx = uniform(rng, 0.8, 1.4); sy = uniform(rng, 0.6, 0.9); sz = uniform(rng, 0.70, 0.78); break;
    case kChair: sx = uniform(rng, 0.40, 0.50); sy = uniform(rng, 0.40, 0.50); sz = uniform(rng, 0.80, 0.95); break;
    case kSofa: sx = uniform(rng, 1.4, 2.0); sy = uniform(rng, 0.7, 0.9); sz = uniform(rng, 0.70, 0.85); break;
    case kClutter: sx = uniform(rng, 0.2, 0.4); sy = uniform(rng, 0.2, 0.4); sz = uniform(rng, 0.2, 0.5); break;
    case kBoard: {
      const double w = uniform(rng, 0.8, 1.5);
      constexpr double kThickness = 0.04;
      constexpr double kGap = 0.02;
      z0 = uniform(rng, 0.8, 1.0);
      sz = std::min(uniform(rng, 0.8, 1.0), 0.85 * spec.height - z0);
      const auto wall = uniform_index(rng, 4);
      const bool along_x = wall < 2;
      const double span = along_x ? spec.width : spec.depth;
      const double start = uniform(rng, kMargin, std::max(kMargin, span - kMargin - w));
      Box b{cls, 0, 0, z0, 0, 0, z0 + sz};
      if (along_x) {
        b.x0 = start;
        b.x1 = start + w;
        b.y0 = wall == 0 ? kGap : spec.depth - kGap - kThickness;
        b.y1 = b.y0 + kThickness;
      } else {
        b.y0 = start;
        b.y1 = start + w;
        b.x0 = wall == 2 ? kGap : spec.width - kGap - kThickness;
        b.x1 = b.x0 + kThickness;
      }
      return b;
    }
    default: throw std::invalid_argument("object palette contains non-furniture class " + std::to_string(cls));
  }
  if (uniform01(rng) < 0.5) std::swap(sx, sy);
  const double x0 = uniform(rng, kMargin, std::max(kMargin, spec.width - kMargin - sx));
  const double y0 = uniform(rng, kMargin, std::max(kMargin, spec.depth - kMargin - sy));
  return {cls, x0, y0, z0, x0 + sx, y0 + sy, z0 + sz};
}

}  // namespace

std::string_view class_name(int semantic_class) {
  if (semantic_class < 0 || static_cast<std::size_t>(semantic_class) >= kNumClasses) return "unknown";
  return kClassNames[static_cast<std::size_t>(semantic_class)];
}

int class_from_name(std::string_view name) {
  for (std::size_t c = 0; c < kNumClasses; ++c)
    if (kClassNames[c] == name) return static_cast<int>(c);
  throw std::invalid_argument("unknown class name '" + std::string(name) + "'");
}

void PointCloud::validate() const {
  if (points.size() % kPointFeatures) {
    throw std::invalid_argument("point matrix size " + std::to_string(points.size()) +
                                " is not a multiple of " + std::to_string(kPointFeatures));
  }
  const std::size_t n = size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 6; t < 9; ++t) {
      const double v = points[i * kPointFeatures + t];
      if (!(v >= 0.0 && v <= 1.0)) {
        throw std::invalid_argument("normalized coordinate out of [0,1] at point " + std::to_string(i));
      }
    }
  if (gt_semantic && gt_semantic->size() != n) throw std::invalid_argument("semantic label count mismatch");
  if (gt_instance && gt_instance->size() != n) throw std::invalid_argument("instance label count mismatch");
  if (has_labels()) {
    std::unordered_map<int, int> cls_of;
    for (std::size_t i = 0; i < n; ++i) {
      const int inst = (*gt_instance)[i];
      const int cls = (*gt_semantic)[i];
      if (inst < 0) throw std::invalid_argument("negative instance id at point " + std::to_string(i));
      if (cls < 0 || static_cast<std::size_t>(cls) >= kNumClasses) {
        throw std::invalid_argument("semantic class out of range at point " + std::to_string(i));
      }
      auto [it, inserted] = cls_of.emplace(inst, cls);
      if (!inserted && it->second != cls) {
        throw std::invalid_argument("instance " + std::to_string(inst) + " spans classes " +
                                    std::to_string(it->second) + " and " + std::to_string(cls));
      }
    }
  }
}

PointCloud PointCloud::select(std::span<const std::size_t> indices) const {
  PointCloud out;
  out.points.reserve(indices.size() * kPointFeatures);
  for (auto i : indices) {
    const auto r = row(i);
    out.points.insert(out.points.end(), r.begin(), r.end());
  }
  auto pick = [&](const std::optional<std::vector<int>>& src) -> std::optional<std::vector<int>> {
    if (!src) return std::nullopt;
    std::vector<int> v;
    v.reserve(indices.size());
    for (auto i : indices) v.push_back((*src)[i]);
    return v;
  };
  out.gt_semantic = pick(gt_semantic);
  out.gt_instance = pick(gt_instance);
  return out;
}

std::vector<int> canonicalize_instances(std::span<const int> instance_ids) {
  std::unordered_map<int, int> remap;
  std::vector<int> out;
  out.reserve(instance_ids.size());
  for (int id : instance_ids) {
    auto [it, inserted] = remap.emplace(id, static_cast<int>(remap.size()));
    out.push_back(it->second);
  }
  return out;
}

RoomBounds bounds_of(std::span<const double> rows, std::size_t stride) {
  RoomBounds b;
  b.min.fill(0.0);
  b.max.fill(0.0);
  const std::size_t n = rows.size() / stride;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < 3; ++t) {
      const double v = rows[i * stride + t];
      if (i == 0 || v < b.min[t]) b.min[t] = v;
      if (i == 0 || v > b.max[t]) b.max[t] = v;
    }
  return b;
}

PointCloud featurize(std::span<const double> xyzrgb, const RoomBounds& bounds) {
  if (xyzrgb.size() % 6) throw std::invalid_argument("featurize: input is not N×6");
  for (std::size_t t = 0; t < 3; ++t) {
    if (!(bounds.max[t] > bounds.min[t])) {
      throw std::invalid_argument("featurize: zero room extent on axis " + std::to_string(t));
    }
  }
  const std::size_t n = xyzrgb.size() / 6;
  PointCloud cloud;
  cloud.points.resize(n * kPointFeatures);
  for (std::size_t i = 0; i < n; ++i) {
    const double* src = xyzrgb.data() + i * 6;
    double* dst = cloud.points.data() + i * kPointFeatures;
    std::copy(src, src + 6, dst);
    for (std::size_t t = 0; t < 3; ++t) {
      const double v = (src[t] - bounds.min[t]) / (bounds.max[t] - bounds.min[t]);
      if (v < 0.0 || v > 1.0) {
        throw std::invalid_argument("featurize: point " + std::to_string(i) + " lies outside the room bounds");
      }
      dst[6 + t] = v;
    }
  }
  return cloud;
}

void SceneSpec::validate() const {
  if (!(width > 0.0 && depth > 0.0 && height > 0.0)) {
    throw std::invalid_argument("scene spec: room dimensions must be positive");
  }
  if (width < 1.0 || depth < 1.0 || height < 1.5) {
    throw std::invalid_argument("scene spec: room too small (min 1 × 1 × 1.5 m)");
  }
  if (!(density > 0.0)) throw std::invalid_argument("scene spec: density must be positive");
  if (num_objects > 0 && palette.empty()) throw std::invalid_argument("scene spec: empty palette");
  for (int c : palette) {
    if (c < kTable || c > kClutter) {
      throw std::invalid_argument("scene spec: palette class '" + std::string(class_name(c)) +
                                  "' is not furniture");
    }
  }
}

SceneSpec parse_scene_spec(std::string_view text) {
  const auto kv = KeyValueConfig::parse(text);
  SceneSpec spec;
  spec.width = kv.get_double("width", spec.width);
  spec.depth = kv.get_double("depth", spec.depth);
  spec.height = kv.get_double("height", spec.height);
  spec.num_objects = static_cast<std::size_t>(kv.get_int("num_objects", static_cast<std::int64_t>(spec.num_objects)));
  spec.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<std::int64_t>(spec.seed)));
  spec.ceiling = kv.get_bool("ceiling", spec.ceiling);
  spec.density = kv.get_double("density", spec.density);
  spec.position_noise = kv.get_double("position_noise", spec.position_noise);
  spec.color_noise = kv.get_double("color_noise", spec.color_noise);
  spec.object_clearance = kv.get_double("object_clearance", spec.object_clearance);
  if (auto palette = kv.get("palette")) {
    spec.palette.clear();
    std::stringstream ss(*palette);
    std::string name;
    while (std::getline(ss, name, ',')) {
      name.erase(0, name.find_first_not_of(' '));
      name.erase(name.find_last_not_of(' ') + 1);
      if (!name.empty()) spec.palette.push_back(class_from_name(name));
    }
  }
  spec.validate();
  return spec;
}

std::string format_scene_spec(const SceneSpec& spec) {
  std::ostringstream out;
  out.precision(17);
  out << "width = " << spec.width << "\ndepth = " << spec.depth << "\nheight = " << spec.height
      << "\nnum_objects = " << spec.num_objects << "\nseed = " << spec.seed
      << "\nceiling = " << (spec.ceiling ? "true" : "false") << "\ndensity = " << spec.density
      << "\nposition_noise = " << spec.position_noise << "\ncolor_noise = " << spec.color_noise
      << "\nobject_clearance = " << spec.object_clearance << "\npalette = ";
  for (std::size_t i = 0; i < spec.palette.size(); ++i)
    out << (i ? "," : "") << class_name(spec.palette[i]);
  out << "\n";
  return out.str();
}

std::size_t expected_instance_count(const SceneSpec& spec) {
  return 5 + (spec.ceiling ? 1 : 0) + spec.num_objects;
}

PointCloud generate_scene(const SceneSpec& spec) {
  spec.validate();
  Rng layout_rng(derive_seed(spec.seed, 1));

  constexpr int kMaxAttempts = 2000;
  std::vector<Box> objects;
  for (std::size_t k = 0; k < spec.num_objects; ++k) {
    const int cls = spec.palette[uniform_index(layout_rng, spec.palette.size())];
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      Box b = propose_object(cls, spec, layout_rng);
      if (b.x1 > spec.width || b.y1 > spec.depth) continue;
      const bool clash = std::any_of(objects.begin(), objects.end(), [&](const Box& o) {
        return footprints_overlap(o, b, spec.object_clearance);
      });
      if (!clash) {
        objects.push_back(b);
        placed = true;
      }
    }
    if (!placed) {
      throw std::invalid_argument("scene spec: cannot place " + std::to_string(spec.num_objects) +
                                  " objects in a " + std::to_string(spec.width) + " x " +
                                  std::to_string(spec.depth) + " m room");
    }
  }

  SceneBuilder sb{spec, Rng(derive_seed(spec.seed, 2)), {}, {}, {}};
  const double w = spec.width, d = spec.depth, h = spec.height;
  // Floor under grounded furniture is occluded in a real scan and not sampled.
  sb.rect({0, 0, 0}, {w, 0, 0}, {0, d, 0}, kFloor, 0, [&](double x, double y, double) {
    return std::none_of(objects.begin(), objects.end(), [&](const Box& o) {
      return o.z0 <= 0.0 && x >= o.x0 && x <= o.x1 && y >= o.y0 && y <= o.y1;
    });
  });
  sb.rect({0, 0, 0}, {w, 0, 0}, {0, 0, h}, kWall, 1);
  sb.rect({0, d, 0}, {w, 0, 0}, {0, 0, h}, kWall, 2);
  sb.rect({0, 0, 0}, {0, d, 0}, {0, 0, h}, kWall, 3);
  sb.rect({w, 0, 0}, {0, d, 0}, {0, 0, h}, kWall, 4);
  int next_instance = 5;
  if (spec.ceiling) sb.rect({0, 0, h}, {w, 0, 0}, {0, d, 0}, kCeiling, next_instance++);
  for (const auto& o : objects) sb.box(o, next_instance++);

  PointCloud cloud = featurize(sb.xyzrgb, bounds_of(sb.xyzrgb, 6));
  cloud.gt_semantic = std::move(sb.semantic);
  cloud.gt_instance = canonicalize_instances(sb.instance);
  return cloud;
}

}  // namespace bevis
