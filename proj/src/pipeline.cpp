#include "bevis/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "bevis/checkpoint.hpp"
#include "bevis/cloud_io.hpp"
#include "bevis/losses.hpp"
#include "bevis/render.hpp"

namespace bevis {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string join_sizes(std::span<const std::size_t> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

template <std::size_t N>
std::array<std::size_t, N> parse_sizes(const std::string& key, const std::string& text) {
  std::array<std::size_t, N> out{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == N) break;
    try {
      out[i] = static_cast<std::size_t>(std::stoul(item));
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': '" + item + "' is not a count");
    }
    ++i;
  }
  if (i != N || std::getline(ss, item, ',')) {
    throw ConfigError("config key '" + key + "' needs exactly " + std::to_string(N) + " values");
  }
  return out;
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "seed", "gen.scenes", "gen.min_objects", "gen.max_objects", "gen.room_min", "gen.room_max",
      "gen.height_min", "gen.height_max", "gen.density", "gen.ceiling", "gen.train_fraction",
      "gen.val_fraction", "bev.cell_size", "bev.max_dim", "bev.ground_percentile",
      "bev.ceiling_fraction", "net2d.embedding_dim", "net2d.widths", "loss.delta_var",
      "loss.delta_dist", "loss.samples", "train2d.steps", "train2d.batch", "train2d.eval_every",
      "train2d.patience", "train2d.augment", "train2d.lr", "train2d.decay_rate",
      "train2d.decay_interval", "net3d.k", "net3d.widths", "net3d.head_width", "net3d.global_width", "net3d.knn_z_scale", "train3d.steps",
      "train3d.batch", "train3d.eval_every", "train3d.patience", "train3d.val_blocks",
      "train3d.lr", "train3d.decay_rate", "train3d.decay_interval", "block.diameter",
      "block.points", "meanshift.bandwidth", "meanshift.merge_radius", "meanshift.max_iters",
      "meanshift.tol", "split.alpha", "connectivity.radius", "connectivity.min_points", "eval.min_ap50", "eval.min_miou"};
  return keys;
}

std::size_t get_size(const KeyValueConfig& kv, const std::string& key, std::size_t fallback) {
  const auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
  if (v < 0) throw ConfigError("config key '" + key + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

Tensor vector_record(std::span<const double> values) {
  return Tensor({values.size()}, std::vector<double>(values.begin(), values.end()));
}

Tensor size_record(std::span<const std::size_t> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::vector<double>(values.begin(), values.end()));
}

std::vector<std::size_t> read_sizes(const Tensor& t) {
  std::vector<std::size_t> out;
  for (double v : t.data()) out.push_back(static_cast<std::size_t>(v));
  return out;
}

std::vector<NamedTensor> snapshot(const ParameterRegistry& reg) {
  std::vector<NamedTensor> out;
  for (const auto* list : {&reg.params, &reg.buffers})
    for (const auto& nt : *list)
      out.push_back({nt.name, Tensor(nt.tensor.shape(), std::vector<double>(nt.tensor.data().begin(),
                                                                            nt.tensor.data().end()))});
  return out;
}

std::vector<NamedTensor> unet_meta(const UNetConfig& c, std::span<const double> class_weights) {
  const std::vector<std::size_t> shape{c.in_channels, c.embedding_dim, c.num_classes, c.widths[0],
                                       c.widths[1],   c.widths[2],     c.widths[3]};
  return {{"meta/unet", size_record(shape)}, {"meta/class_weights", vector_record(class_weights)}};
}

UNetConfig unet_from_meta(std::span<const NamedTensor> records, std::uint64_t seed) {
  const auto v = read_sizes(find_record(records, "meta/unet"));
  if (v.size() != 7) throw FormatError("meta/unet record has the wrong length", 0);
  UNetConfig c;
  c.in_channels = v[0];
  c.embedding_dim = v[1];
  c.num_classes = v[2];
  c.widths = {v[3], v[4], v[5], v[6]};
  c.seed = seed;
  return c;
}

std::vector<NamedTensor> prop_meta(const PropagationConfig& c, std::span<const double> class_weights,
                                   std::span<const double> average_size) {
  const std::vector<std::size_t> shape{c.point_features, c.embedding_dim, c.num_classes,
                                       c.k,              c.edge_widths[0], c.edge_widths[1],
                                       c.edge_widths[2], c.global_width, c.head_width};
  return {{"meta/prop", size_record(shape)},
          {"meta/knn_z_scale", Tensor({1}, {c.knn_z_scale})},
          {"meta/class_weights", vector_record(class_weights)},
          {"meta/average_size", vector_record(average_size)}};
}

PropagationConfig prop_from_meta(std::span<const NamedTensor> records, std::uint64_t seed) {
  const auto v = read_sizes(find_record(records, "meta/prop"));
  if (v.size() != 9) throw FormatError("meta/prop record has the wrong length", 0);
  PropagationConfig c;
  c.point_features = v[0];
  c.embedding_dim = v[1];
  c.num_classes = v[2];
  c.k = v[3];
  c.edge_widths = {v[4], v[5], v[6]};
  c.global_width = v[7];
  c.head_width = v[8];
  c.knn_z_scale = find_record(records, "meta/knn_z_scale").item();
  c.seed = seed;
  return c;
}

std::vector<double> record_values(std::span<const NamedTensor> records, std::string_view name) {
  const auto d = find_record(records, name).data();
  return {d.begin(), d.end()};
}

PointCloud load_scene(const fs::path& path) {
  auto file = load_cloud(path);
  return std::move(file.cloud);
}

struct BevFeatures {
  BirdsEyeView view;
  std::vector<double> embedding_map;
  PointFeatures points;
};

BevFeatures bev_features(InstanceNet2D& net, const PointCloud& cloud, const PipelineConfig& config) {
  BevFeatures out;
  out.view = scene_view(cloud, config);
  net.set_training(false);
  const auto result = net.forward(masked_view_tensor(out.view));
  out.embedding_map.assign(result.embedding.data().begin(), result.embedding.data().end());
  const std::size_t d = net.config().embedding_dim;
  out.points = unproject(out.view, out.embedding_map, d, cloud.size());
  return out;
}

struct CsvLog {
  std::ofstream out;
  CsvLog(const fs::path& path, bool append, const std::string& header) {
    const bool fresh = !append || !fs::exists(path);
    out.open(path, fresh ? std::ios::trunc : std::ios::app);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    if (fresh) out << header << "\n";
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct EarlyStop {
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad = 0;
  std::vector<NamedTensor> best_records;
};

std::vector<NamedTensor> train_state_records(std::size_t step, const EarlyStop& es) {
  return {{"meta/train_state",
           Tensor({3}, {static_cast<double>(step), es.best, static_cast<double>(es.bad)})}};
}

fs::path ckpt_path(const fs::path& run_dir, const std::string& stage) {
  return run_dir / ("net" + stage + ".ckpt");
}
fs::path last_path(const fs::path& run_dir, const std::string& stage) {
  return run_dir / ("net" + stage + ".last.ckpt");
}

}  // namespace

PipelineConfig PipelineConfig::from_config(const KeyValueConfig& kv) {
  for (const auto& [key, value] : kv.entries())
    if (!known_keys().count(key)) throw ConfigError("unknown config key '" + key + "'");
  PipelineConfig c;
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<std::int64_t>(c.seed)));
  c.num_scenes = get_size(kv, "gen.scenes", c.num_scenes);
  c.min_objects = get_size(kv, "gen.min_objects", c.min_objects);
  c.max_objects = get_size(kv, "gen.max_objects", c.max_objects);
  c.room_min = kv.get_double("gen.room_min", c.room_min);
  c.room_max = kv.get_double("gen.room_max", c.room_max);
  c.height_min = kv.get_double("gen.height_min", c.height_min);
  c.height_max = kv.get_double("gen.height_max", c.height_max);
  c.density = kv.get_double("gen.density", c.density);
  c.ceiling = kv.get_bool("gen.ceiling", c.ceiling);
  c.train_fraction = kv.get_double("gen.train_fraction", c.train_fraction);
  c.val_fraction = kv.get_double("gen.val_fraction", c.val_fraction);
  c.raster.cell_size = kv.get_double("bev.cell_size", c.raster.cell_size);
  c.raster.max_dim = get_size(kv, "bev.max_dim", c.raster.max_dim);
  c.raster.ground_percentile = kv.get_double("bev.ground_percentile", c.raster.ground_percentile);
  c.ceiling_fraction = kv.get_double("bev.ceiling_fraction", c.ceiling_fraction);
  c.unet.embedding_dim = get_size(kv, "net2d.embedding_dim", c.unet.embedding_dim);
  if (auto w = kv.get("net2d.widths")) c.unet.widths = parse_sizes<4>("net2d.widths", *w);
  c.pair.delta_var = kv.get_double("loss.delta_var", c.pair.delta_var);
  c.pair.delta_dist = kv.get_double("loss.delta_dist", c.pair.delta_dist);
  c.pair.samples_per_instance = get_size(kv, "loss.samples", c.pair.samples_per_instance);
  c.steps_2d = get_size(kv, "train2d.steps", c.steps_2d);
  c.batch_2d = get_size(kv, "train2d.batch", c.batch_2d);
  c.eval_every_2d = get_size(kv, "train2d.eval_every", c.eval_every_2d);
  c.patience_2d = get_size(kv, "train2d.patience", c.patience_2d);
  c.augment_2d = kv.get_bool("train2d.augment", c.augment_2d);
  c.adam_2d.base_lr = kv.get_double("train2d.lr", c.adam_2d.base_lr);
  c.adam_2d.decay_rate = kv.get_double("train2d.decay_rate", c.adam_2d.decay_rate);
  c.adam_2d.decay_interval = get_size(kv, "train2d.decay_interval", c.adam_2d.decay_interval);
  c.prop.k = get_size(kv, "net3d.k", c.prop.k);
  if (auto w = kv.get("net3d.widths")) c.prop.edge_widths = parse_sizes<3>("net3d.widths", *w);
  c.prop.head_width = get_size(kv, "net3d.head_width", c.prop.head_width);
  c.prop.global_width = get_size(kv, "net3d.global_width", c.prop.global_width);
  c.prop.knn_z_scale = kv.get_double("net3d.knn_z_scale", c.prop.knn_z_scale);
  c.steps_3d = get_size(kv, "train3d.steps", c.steps_3d);
  c.batch_3d = get_size(kv, "train3d.batch", c.batch_3d);
  c.eval_every_3d = get_size(kv, "train3d.eval_every", c.eval_every_3d);
  c.patience_3d = get_size(kv, "train3d.patience", c.patience_3d);
  c.val_blocks = get_size(kv, "train3d.val_blocks", c.val_blocks);
  c.adam_3d.base_lr = kv.get_double("train3d.lr", c.adam_3d.base_lr);
  c.adam_3d.decay_rate = kv.get_double("train3d.decay_rate", c.adam_3d.decay_rate);
  c.adam_3d.decay_interval = get_size(kv, "train3d.decay_interval", c.adam_3d.decay_interval);
  c.inference.diameter = kv.get_double("block.diameter", c.inference.diameter);
  c.inference.block_points = get_size(kv, "block.points", c.inference.block_points);
  c.mean_shift.bandwidth = kv.get_double("meanshift.bandwidth", c.mean_shift.bandwidth);
  c.mean_shift.mode_merge_radius = kv.get_double("meanshift.merge_radius", c.mean_shift.mode_merge_radius);
  c.mean_shift.max_iters = get_size(kv, "meanshift.max_iters", c.mean_shift.max_iters);
  c.mean_shift.convergence_tol = kv.get_double("meanshift.tol", c.mean_shift.convergence_tol);
  c.split_alpha = kv.get_double("split.alpha", c.split_alpha);
  c.connectivity.radius = kv.get_double("connectivity.radius", c.connectivity.radius);
  c.connectivity.min_points = get_size(kv, "connectivity.min_points", c.connectivity.min_points);
  if (kv.contains("eval.min_ap50")) c.min_ap50 = kv.get_double("eval.min_ap50", 0.0);
  if (kv.contains("eval.min_miou")) c.min_miou = kv.get_double("eval.min_miou", 0.0);
  c.validate();
  return c;
}

KeyValueConfig PipelineConfig::to_config() const {
  KeyValueConfig kv;
  auto num = [](double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
  };
  kv.set("seed", std::to_string(seed));
  kv.set("gen.scenes", std::to_string(num_scenes));
  kv.set("gen.min_objects", std::to_string(min_objects));
  kv.set("gen.max_objects", std::to_string(max_objects));
  kv.set("gen.room_min", num(room_min));
  kv.set("gen.room_max", num(room_max));
  kv.set("gen.height_min", num(height_min));
  kv.set("gen.height_max", num(height_max));
  kv.set("gen.density", num(density));
  kv.set("gen.ceiling", ceiling ? "true" : "false");
  kv.set("gen.train_fraction", num(train_fraction));
  kv.set("gen.val_fraction", num(val_fraction));
  kv.set("bev.cell_size", num(raster.cell_size));
  kv.set("bev.max_dim", std::to_string(raster.max_dim));
  kv.set("bev.ground_percentile", num(raster.ground_percentile));
  kv.set("bev.ceiling_fraction", num(ceiling_fraction));
  kv.set("net2d.embedding_dim", std::to_string(unet.embedding_dim));
  kv.set("net2d.widths", join_sizes(unet.widths));
  kv.set("loss.delta_var", num(pair.delta_var));
  kv.set("loss.delta_dist", num(pair.delta_dist));
  kv.set("loss.samples", std::to_string(pair.samples_per_instance));
  kv.set("train2d.steps", std::to_string(steps_2d));
  kv.set("train2d.batch", std::to_string(batch_2d));
  kv.set("train2d.eval_every", std::to_string(eval_every_2d));
  kv.set("train2d.patience", std::to_string(patience_2d));
  kv.set("train2d.augment", augment_2d ? "true" : "false");
  kv.set("train2d.lr", num(adam_2d.base_lr));
  kv.set("train2d.decay_rate", num(adam_2d.decay_rate));
  kv.set("train2d.decay_interval", std::to_string(adam_2d.decay_interval));
  kv.set("net3d.k", std::to_string(prop.k));
  kv.set("net3d.widths", join_sizes(prop.edge_widths));
  kv.set("net3d.head_width", std::to_string(prop.head_width));
  kv.set("net3d.global_width", std::to_string(prop.global_width));
  kv.set("net3d.knn_z_scale", fmt(prop.knn_z_scale));
  kv.set("train3d.steps", std::to_string(steps_3d));
  kv.set("train3d.batch", std::to_string(batch_3d));
  kv.set("train3d.eval_every", std::to_string(eval_every_3d));
  kv.set("train3d.patience", std::to_string(patience_3d));
  kv.set("train3d.val_blocks", std::to_string(val_blocks));
  kv.set("train3d.lr", num(adam_3d.base_lr));
  kv.set("train3d.decay_rate", num(adam_3d.decay_rate));
  kv.set("train3d.decay_interval", std::to_string(adam_3d.decay_interval));
  kv.set("block.diameter", num(inference.diameter));
  kv.set("block.points", std::to_string(inference.block_points));
  kv.set("meanshift.bandwidth", num(mean_shift.bandwidth));
  kv.set("meanshift.merge_radius", num(mean_shift.mode_merge_radius));
  kv.set("meanshift.max_iters", std::to_string(mean_shift.max_iters));
  kv.set("meanshift.tol", num(mean_shift.convergence_tol));
  kv.set("split.alpha", num(split_alpha));
  kv.set("connectivity.radius", num(connectivity.radius));
  kv.set("connectivity.min_points", std::to_string(connectivity.min_points));
  if (min_ap50) kv.set("eval.min_ap50", num(*min_ap50));
  if (min_miou) kv.set("eval.min_miou", num(*min_miou));
  return kv;
}

void PipelineConfig::validate() const {
  if (min_objects > max_objects) throw ConfigError("gen.min_objects exceeds gen.max_objects");
  if (!(room_min > 0.0 && room_min <= room_max)) throw ConfigError("gen.room_min/room_max invalid");
  if (!(height_min > 0.0 && height_min <= height_max)) {
    throw ConfigError("gen.height_min/height_max invalid");
  }
  if (!(train_fraction >= 0.0 && val_fraction >= 0.0 && train_fraction + val_fraction <= 1.0)) {
    throw ConfigError("split fractions must be non-negative and sum to at most 1");
  }
  if (!(raster.cell_size > 0.0)) throw ConfigError("bev.cell_size must be positive");
  if (batch_2d == 0 || batch_3d == 0) throw ConfigError("batch sizes must be positive");
  if (eval_every_2d == 0 || eval_every_3d == 0) throw ConfigError("eval intervals must be positive");
  if (inference.block_points <= prop.k) throw ConfigError("block.points must exceed net3d.k");
  if (prop.head_width == 0 || prop.global_width == 0) throw ConfigError("net3d widths must be positive");
  if (!(prop.knn_z_scale > 0.0 && prop.knn_z_scale <= 1.0)) {
    throw ConfigError("net3d.knn_z_scale must lie in (0, 1]");
  }
  if (!(split_alpha > 0.0)) throw ConfigError("split.alpha must be positive");
  pair.validate();
  mean_shift.validate();
  connectivity.validate();
}

std::filesystem::path scene_path(const fs::path& dir, const std::string& name) {
  return dir / (name + ".bevpc");
}

std::vector<ManifestEntry> read_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.txt";
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest '" + path.string() + "'");
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    ManifestEntry e;
    if (!(ss >> e.name >> e.split) || (e.split != "train" && e.split != "val" && e.split != "test")) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": expected '<scene> train|val|test'");
    }
    out.push_back(std::move(e));
  }
  return out;
}

void write_manifest(const fs::path& dir, const std::vector<ManifestEntry>& entries) {
  const fs::path path = dir / "manifest.txt";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest '" + path.string() + "'");
  for (const auto& e : entries) out << e.name << " " << e.split << "\n";
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

std::vector<std::string> scenes_in_split(const std::vector<ManifestEntry>& entries,
                                         const std::string& split) {
  std::vector<std::string> out;
  for (const auto& e : entries)
    if (split == "all" || e.split == split) out.push_back(e.name);
  return out;
}

SceneSpec scene_spec_for(const PipelineConfig& config, std::size_t index, std::size_t attempt) {
  const std::uint64_t stream = 1000 + index * 64 + attempt;
  Rng rng(derive_seed(config.seed, stream));
  SceneSpec spec;
  spec.width = uniform(rng, config.room_min, config.room_max);
  spec.depth = uniform(rng, config.room_min, config.room_max);
  spec.height = uniform(rng, config.height_min, config.height_max);
  spec.num_objects = config.min_objects +
                     static_cast<std::size_t>(uniform_index(rng, config.max_objects - config.min_objects + 1));
  spec.density = config.density;
  spec.ceiling = config.ceiling;
  spec.seed = derive_seed(config.seed, stream + 500000);
  return spec;
}

GenResult cmd_gen(const PipelineConfig& config, const fs::path& out_dir, std::ostream& log) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create '" + out_dir.string() + "': " + ec.message());
  const std::size_t n = config.num_scenes;
  const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(config.train_fraction * static_cast<double>(n))));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(config.val_fraction * static_cast<double>(n))));
  GenResult result;
  for (std::size_t i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%03zu", i);
    PointCloud cloud;
    SceneSpec spec;
    constexpr std::size_t kAttempts = 16;
    for (std::size_t attempt = 0;; ++attempt) {
      spec = scene_spec_for(config, i, attempt);
      try {
        cloud = generate_scene(spec);
        break;
      } catch (const std::invalid_argument&) {
        if (attempt + 1 == kAttempts) throw;
      }
    }
    save_cloud(scene_path(out_dir, name), cloud);
    {
      const fs::path spec_path = out_dir / (std::string(name) + ".spec");
      std::ofstream s(spec_path, std::ios::trunc);
      if (!s) throw std::runtime_error("cannot write '" + spec_path.string() + "'");
      s << format_scene_spec(spec);
    }
    const std::string split = i < n_train ? "train" : i < n_train + n_val ? "val" : "test";
    result.manifest.push_back({name, split});
    log << name << ": " << cloud.size() << " points, " << spec.num_objects << " objects, " << split
        << "\n";
  }
  write_manifest(out_dir, result.manifest);
  return result;
}

BirdsEyeView scene_view(const PointCloud& cloud, const PipelineConfig& config) {
  auto cut = remove_ceiling(cloud, config.ceiling_fraction, config.raster.ground_percentile);
  BirdsEyeView view = rasterize(cut.cloud, config.raster);
  remap_indices(view, cut.source_index);
  return pad_to_multiple(view, kUNetAlignment);
}

namespace {

TrainResult train_2d(const PipelineConfig& config, const fs::path& data_dir, const fs::path& run_dir,
                     const TrainOptions& options, std::ostream& log) {
  const auto manifest = read_manifest(data_dir);
  const auto train_names = scenes_in_split(manifest, "train");
  const auto val_names = scenes_in_split(manifest, "val");
  if (train_names.empty()) throw std::runtime_error("no training scenes in '" + data_dir.string() + "'");

  auto load_views = [&](const std::vector<std::string>& names) {
    std::vector<BirdsEyeView> views;
    for (const auto& name : names) {
      const auto cloud = load_scene(scene_path(data_dir, name));
      if (!cloud.has_labels()) throw std::runtime_error("scene '" + name + "' has no labels");
      views.push_back(scene_view(cloud, config));
    }
    return views;
  };
  const auto train_views = load_views(train_names);
  const auto val_views = load_views(val_names);

  std::vector<int> cell_labels;
  for (const auto& v : train_views) {
    const auto l = valid_semantic_labels(v);
    cell_labels.insert(cell_labels.end(), l.begin(), l.end());
  }
  const auto class_weights = class_weights_from_labels(cell_labels, config.unet.num_classes);

  UNetConfig ucfg = config.unet;
  ucfg.seed = derive_seed(config.seed, 11);
  InstanceNet2D net(ucfg);
  auto params = net.registry().param_tensors();
  AdamState adam = make_adam(params, config.adam_2d);
  EarlyStop es;
  std::size_t start = 0;
  if (options.resume && fs::exists(last_path(run_dir, "2d"))) {
    const auto records = load_checkpoint(last_path(run_dir, "2d"));
    assign_records(net.registry(), records);
    restore_adam(adam, net.registry(), records);
    const auto state = find_record(records, "meta/train_state").data();
    start = static_cast<std::size_t>(state[0]);
    es.best = state[1];
    es.bad = static_cast<std::size_t>(state[2]);
    if (fs::exists(ckpt_path(run_dir, "2d"))) {
      for (auto& r : load_checkpoint(ckpt_path(run_dir, "2d")))
        if (r.name.rfind("meta/", 0) != 0) es.best_records.push_back(std::move(r));
    }
    log << "resuming stage 2d at step " << start << "\n";
  }

  CsvLog curve(run_dir / "curve2d.csv", options.resume && start > 0,
               "step,l_var,l_dist,l_sem,total,val_total");
  auto validate = [&]() {
    const auto& views = val_views.empty() ? train_views : val_views;
    net.set_training(false);
    double total = 0.0;
    for (std::size_t i = 0; i < views.size(); ++i)
      total += view_loss_2d(net, views[i], config.pair, class_weights,
                            derive_seed(config.seed, 300000 + i)).report.total;
    net.set_training(true);
    return total / static_cast<double>(views.size());
  };

  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t step = start;
  for (; step < config.steps_2d; ++step) {
    Rng rng(derive_seed(config.seed, 200000 + step));
    std::vector<BirdsEyeView> batch;
    for (std::size_t b = 0; b < config.batch_2d; ++b) {
      const auto& v = train_views[uniform_index(rng, train_views.size())];
      batch.push_back(config.augment_2d ? pad_to_multiple(augment(v, rng()), kUNetAlignment) : v);
    }
    const auto report = train_step_2d(net, adam, batch, config.pair, class_weights, rng());
    result.aborted_steps |= report.aborted;
    ++result.steps_run;
    curve.out << step << "," << fmt(report.l_var) << "," << fmt(report.l_dist) << ","
              << fmt(report.l_sem) << "," << fmt(report.total) << ",";
    const bool eval_now = (step + 1) % config.eval_every_2d == 0 || step + 1 == config.steps_2d;
    if (eval_now) {
      const double val = validate();
      curve.out << fmt(val);
      log << "2d step " << step + 1 << " loss " << fmt(report.total) << " val " << fmt(val) << " ("
          << fmt(seconds_since(t0)) << " s)\n";
      if (val < es.best) {
        es.best = val;
        es.bad = 0;
        es.best_records = snapshot(net.registry());
      } else if (++es.bad >= config.patience_2d) {
        curve.out << "\n";
        ++step;
        result.early_stopped = true;
        break;
      }
    }
    curve.out << "\n";
  }
  if (es.best_records.empty()) es.best_records = snapshot(net.registry());
  result.final_step = step;
  result.best_val = es.best;

  auto best = es.best_records;
  for (auto& m : unet_meta(ucfg, class_weights)) best.push_back(std::move(m));
  save_checkpoint(ckpt_path(run_dir, "2d"), best);
  auto last = snapshot(net.registry());
  for (auto& m : unet_meta(ucfg, class_weights)) last.push_back(std::move(m));
  for (auto& r : adam_records(adam, net.registry())) last.push_back(std::move(r));
  for (auto& r : train_state_records(step, es)) last.push_back(std::move(r));
  save_checkpoint(last_path(run_dir, "2d"), last);
  log << "stage 2d: " << result.steps_run << " steps in " << fmt(seconds_since(t0)) << " s\n";
  return result;
}

InstanceNet2D load_net2d(const PipelineConfig& config, const fs::path& run_dir) {
  const fs::path path = ckpt_path(run_dir, "2d");
  if (!fs::exists(path)) {
    throw std::runtime_error("stage-2d checkpoint '" + path.string() +
                             "' not found; run `train --stage 2d` first");
  }
  const auto records = load_checkpoint(path);
  InstanceNet2D net(unet_from_meta(records, derive_seed(config.seed, 11)));
  assign_records(net.registry(), records);
  net.set_training(false);
  return net;
}

struct Scene3D {
  PointCloud cloud;
  AugmentedPointSet points;
  TargetFeatures targets;
};

TrainResult train_3d(const PipelineConfig& config, const fs::path& data_dir, const fs::path& run_dir,
                     const TrainOptions& options, std::ostream& log) {
  InstanceNet2D net2d = load_net2d(config, run_dir);
  const auto manifest = read_manifest(data_dir);
  const auto train_names = scenes_in_split(manifest, "train");
  const auto val_names = scenes_in_split(manifest, "val");
  if (train_names.empty()) throw std::runtime_error("no training scenes in '" + data_dir.string() + "'");

  const auto t_prep = std::chrono::steady_clock::now();
  auto prepare = [&](const std::vector<std::string>& names) {
    std::vector<Scene3D> scenes;
    for (const auto& name : names) {
      Scene3D s;
      s.cloud = load_scene(scene_path(data_dir, name));
      if (!s.cloud.has_labels()) throw std::runtime_error("scene '" + name + "' has no labels");
      const auto bev = bev_features(net2d, s.cloud, config);
      s.points = concat_bev_features(s.cloud, bev.points);
      s.targets = compute_targets(bev.points, *s.cloud.gt_instance);
      scenes.push_back(std::move(s));
    }
    return scenes;
  };
  const auto train_scenes = prepare(train_names);
  const auto val_scenes = prepare(val_names);
  log << "stage 3d: prepared " << train_scenes.size() + val_scenes.size() << " scenes in "
      << fmt(seconds_since(t_prep)) << " s\n";

  std::vector<int> labels;
  std::vector<PointCloud> train_clouds;
  for (const auto& s : train_scenes) {
    labels.insert(labels.end(), s.cloud.gt_semantic->begin(), s.cloud.gt_semantic->end());
    train_clouds.push_back(s.cloud);
  }
  const std::size_t k_classes = net2d.config().num_classes;
  const auto class_weights = class_weights_from_labels(labels, k_classes);
  const auto average_size = average_instance_sizes(train_clouds, k_classes);

  PropagationConfig pcfg = config.prop;
  pcfg.embedding_dim = net2d.config().embedding_dim;
  pcfg.num_classes = k_classes;
  pcfg.seed = derive_seed(config.seed, 12);
  PropagationNet3D net(pcfg);
  auto params = net.registry().param_tensors();
  AdamState adam = make_adam(params, config.adam_3d);
  EarlyStop es;
  std::size_t start = 0;
  if (options.resume && fs::exists(last_path(run_dir, "3d"))) {
    const auto records = load_checkpoint(last_path(run_dir, "3d"));
    assign_records(net.registry(), records);
    restore_adam(adam, net.registry(), records);
    const auto state = find_record(records, "meta/train_state").data();
    start = static_cast<std::size_t>(state[0]);
    es.best = state[1];
    es.bad = static_cast<std::size_t>(state[2]);
    if (fs::exists(ckpt_path(run_dir, "3d"))) {
      for (auto& r : load_checkpoint(ckpt_path(run_dir, "3d")))
        if (r.name.rfind("meta/", 0) != 0) es.best_records.push_back(std::move(r));
    }
    log << "resuming stage 3d at step " << start << "\n";
  }

  auto draw_block = [&](const std::vector<Scene3D>& scenes, Rng& rng) {
    const auto& s = scenes[uniform_index(rng, scenes.size())];
    const std::size_t anchor = uniform_index(rng, s.cloud.size());
    const std::array<double, 2> center{s.cloud.x(anchor), s.cloud.y(anchor)};
    auto idx = sample_block(s.cloud, center, config.inference.diameter,
                            config.inference.block_points, rng());
    return make_training_block(s.cloud, s.points, s.targets, std::move(idx), center, pcfg.k,
                               pcfg.knn_z_scale);
  };
  std::vector<TrainingBlock> val_blocks;
  {
    const auto& scenes = val_scenes.empty() ? train_scenes : val_scenes;
    Rng rng(derive_seed(config.seed, 500000));
    for (std::size_t i = 0; i < config.val_blocks * scenes.size(); ++i)
      val_blocks.push_back(draw_block(scenes, rng));
  }
  auto validate = [&]() {
    net.set_training(false);
    double total = 0.0;
    for (const auto& b : val_blocks) total += block_loss_3d(net, b, class_weights).report.total;
    net.set_training(true);
    return val_blocks.empty() ? 0.0 : total / static_cast<double>(val_blocks.size());
  };

  CsvLog curve(run_dir / "curve3d.csv", options.resume && start > 0,
               "step,l_inst,l_sem,total,val_total");
  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t step = start;
  for (; step < config.steps_3d; ++step) {
    Rng rng(derive_seed(config.seed, 400000 + step));
    std::vector<TrainingBlock> batch;
    for (std::size_t b = 0; b < config.batch_3d; ++b) batch.push_back(draw_block(train_scenes, rng));
    const auto report = train_step_3d(net, adam, batch, class_weights);
    result.aborted_steps |= report.aborted;
    ++result.steps_run;
    curve.out << step << "," << fmt(report.l_inst) << "," << fmt(report.l_sem) << ","
              << fmt(report.total) << ",";
    const bool eval_now = (step + 1) % config.eval_every_3d == 0 || step + 1 == config.steps_3d;
    if (eval_now) {
      const double val = validate();
      curve.out << fmt(val);
      log << "3d step " << step + 1 << " loss " << fmt(report.total) << " val " << fmt(val) << " ("
          << fmt(seconds_since(t0)) << " s)\n";
      if (val < es.best) {
        es.best = val;
        es.bad = 0;
        es.best_records = snapshot(net.registry());
      } else if (++es.bad >= config.patience_3d) {
        curve.out << "\n";
        ++step;
        result.early_stopped = true;
        break;
      }
    }
    curve.out << "\n";
  }
  if (es.best_records.empty()) es.best_records = snapshot(net.registry());
  result.final_step = step;
  result.best_val = es.best;

  auto best = es.best_records;
  for (auto& m : prop_meta(pcfg, class_weights, average_size)) best.push_back(std::move(m));
  save_checkpoint(ckpt_path(run_dir, "3d"), best);
  auto last = snapshot(net.registry());
  for (auto& m : prop_meta(pcfg, class_weights, average_size)) last.push_back(std::move(m));
  for (auto& r : adam_records(adam, net.registry())) last.push_back(std::move(r));
  for (auto& r : train_state_records(step, es)) last.push_back(std::move(r));
  save_checkpoint(last_path(run_dir, "3d"), last);
  log << "stage 3d: " << result.steps_run << " steps in " << fmt(seconds_since(t0)) << " s\n";
  return result;
}

}  // namespace

TrainResult cmd_train(const std::string& stage, const PipelineConfig& config,
                      const fs::path& data_dir, const fs::path& run_dir, const TrainOptions& options,
                      std::ostream& log) {
  if (stage != "2d" && stage != "3d") {
    throw std::invalid_argument("unknown training stage '" + stage + "' (expected 2d or 3d)");
  }
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) throw std::runtime_error("cannot create '" + run_dir.string() + "': " + ec.message());
  return stage == "2d" ? train_2d(config, data_dir, run_dir, options, log)
                       : train_3d(config, data_dir, run_dir, options, log);
}

TrainedModels load_models(const PipelineConfig& config, const fs::path& run_dir) {
  InstanceNet2D net2d = load_net2d(config, run_dir);
  const fs::path path3d = ckpt_path(run_dir, "3d");
  if (!fs::exists(path3d)) {
    throw std::runtime_error("stage-3d checkpoint '" + path3d.string() +
                             "' not found; run `train --stage 3d` first");
  }
  const auto records = load_checkpoint(path3d);
  PropagationNet3D net3d(prop_from_meta(records, derive_seed(config.seed, 12)));
  assign_records(net3d.registry(), records);
  net3d.set_training(false);
  if (net3d.config().embedding_dim != net2d.config().embedding_dim) {
    throw std::runtime_error("2d and 3d checkpoints disagree on the embedding dimension");
  }
  SplitConfig split{config.split_alpha, record_values(records, "meta/average_size")};
  return {std::move(net2d), std::move(net3d), std::move(split)};
}

ScenePipelineOutput run_scene(TrainedModels& models, const PointCloud& cloud,
                              const PipelineConfig& config) {
  ScenePipelineOutput out;
  auto bev = bev_features(models.net2d, cloud, config);
  out.view = std::move(bev.view);
  out.embedding_map = std::move(bev.embedding_map);
  const auto points = concat_bev_features(cloud, bev.points);
  InferenceConfig icfg = config.inference;
  icfg.seed = derive_seed(config.seed, 13);
  out.prediction = infer_full_scene(models.net3d, cloud, points, icfg);
  if (cloud.size() == 0) return out;
  out.clusters = mean_shift(out.prediction.features, out.prediction.feature_dim, config.mean_shift);
  const auto grouped = assign_semantics(out.clusters, out.prediction.logits, out.prediction.num_classes);
  const auto split = split_inconsistent(out.clusters, grouped.labeling.semantic, models.split);
  const auto pieces = split_disconnected(cloud.points, kPointFeatures, split, config.connectivity);
  out.labels.semantic = grouped.labeling.semantic;
  out.labels.instance = canonicalize_instances(pieces);
  return out;
}

void write_predictions(const fs::path& path, const Labeling& labels) {
  if (labels.semantic.size() != labels.instance.size()) {
    throw std::invalid_argument("write_predictions: label arrays differ in length");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  for (std::size_t i = 0; i < labels.instance.size(); ++i)
    out << i << " " << labels.instance[i] << " " << labels.semantic[i] << "\n";
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

Labeling read_predictions(const fs::path& path, std::size_t expected_points) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
  Labeling labels;
  labels.instance.assign(expected_points, -1);
  labels.semantic.assign(expected_points, -1);
  std::vector<std::uint8_t> seen(expected_points, 0);
  std::string line;
  std::size_t line_no = 0, count = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    long long idx = 0;
    int inst = 0, sem = 0;
    std::string extra;
    if (!(ss >> idx >> inst >> sem) || (ss >> extra)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": expected 'point_index instance_id semantic_id'");
    }
    if (idx < 0 || static_cast<std::size_t>(idx) >= expected_points || seen[static_cast<std::size_t>(idx)]) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": point index " +
                               std::to_string(idx) + " is out of range or repeated");
    }
    seen[static_cast<std::size_t>(idx)] = 1;
    labels.instance[static_cast<std::size_t>(idx)] = inst;
    labels.semantic[static_cast<std::size_t>(idx)] = sem;
    ++count;
  }
  if (count != expected_points) {
    throw std::runtime_error(path.string() + ": " + std::to_string(count) + " predictions for " +
                             std::to_string(expected_points) + " points");
  }
  return labels;
}

namespace {

std::vector<int> cell_values(const BirdsEyeView& view, std::span<const int> per_point) {
  std::vector<int> out(view.cells(), -1);
  for (std::size_t c = 0; c < view.cells(); ++c)
    if (view.valid[c]) out[c] = per_point[static_cast<std::size_t>(view.index_map[c])];
  return out;
}

}  // namespace

void cmd_infer(const PipelineConfig& config, const fs::path& run_dir,
               const std::vector<fs::path>& scene_files, const fs::path& out_dir,
               const InferOptions& options, std::ostream& log) {
  TrainedModels models = load_models(config, run_dir);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create '" + out_dir.string() + "': " + ec.message());
  for (const auto& file : scene_files) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::string name = file.stem().string();
    const PointCloud cloud = load_scene(file);
    const auto out = run_scene(models, cloud, config);
    write_predictions(out_dir / (name + ".txt"), out.labels);
    if (options.write_cloud) {
      PointCloud labelled = cloud;
      labelled.gt_semantic = out.labels.semantic;
      labelled.gt_instance = out.labels.instance;
      CloudExtras extras{out.prediction.feature_dim, out.prediction.features,
                         out.prediction.num_classes, out.prediction.logits};
      save_cloud(out_dir / (name + ".bevpc"), labelled, extras);
    }
    if (options.render) {
      write_ppm(out_dir / (name + "_bev.ppm"), render_bev_colors(out.view));
      if (out.view.has_gt()) write_ppm(out_dir / (name + "_gt.ppm"), render_labels(out.view, out.view.gt_instance));
      write_ppm(out_dir / (name + "_embed.ppm"),
                render_pca(out.view, out.embedding_map, models.net2d.config().embedding_dim));
      if (cloud.size())
        write_ppm(out_dir / (name + "_pred.ppm"), render_labels(out.view, cell_values(out.view, out.labels.instance)));
    }
    std::set<int> ids(out.labels.instance.begin(), out.labels.instance.end());
    log << name << ": " << cloud.size() << " points, " << ids.size() << " instances ("
        << fmt(seconds_since(t0)) << " s)\n";
  }
}

EvalResult cmd_eval(const PipelineConfig& config, const fs::path& pred_dir, const fs::path& gt_dir,
                    const std::string& split) {
  const auto manifest = read_manifest(gt_dir);
  const auto names = scenes_in_split(manifest, split);
  const std::size_t k = config.unet.num_classes;
  ConfusionMatrix confusion(k);
  auto acc = make_report_accumulator(k);
  EvalResult result;
  for (const auto& name : names) {
    const PointCloud gt = load_scene(scene_path(gt_dir, name));
    if (!gt.has_labels()) throw std::runtime_error("GT scene '" + name + "' has no labels");
    Labeling pred;
    const fs::path txt = pred_dir / (name + ".txt");
    const fs::path cloud_file = scene_path(pred_dir, name);
    if (fs::exists(txt)) {
      pred = read_predictions(txt, gt.size());
    } else if (fs::exists(cloud_file)) {
      const PointCloud p = load_scene(cloud_file);
      if (!p.has_labels()) throw std::runtime_error("prediction for scene '" + name + "' has no labels");
      if (p.size() != gt.size()) {
        throw std::runtime_error("scene mismatch for '" + name + "': " + std::to_string(p.size()) +
                                 " predicted points vs " + std::to_string(gt.size()) + " GT points");
      }
      pred = {*p.gt_semantic, *p.gt_instance};
    } else {
      throw std::runtime_error("missing prediction for scene '" + name + "' in '" +
                               pred_dir.string() + "'");
    }
    SceneMetrics sm;
    sm.name = name;
    sm.semantic = semantic_metrics(pred.semantic, *gt.gt_semantic, k);
    confusion.add(pred.semantic, *gt.gt_semantic);
    const auto pred_segments = segments_from_labels(pred.instance, pred.semantic, k);
    const auto gt_segments = segments_from_labels(*gt.gt_instance, *gt.gt_semantic, k);
    sm.ap = strict_ap(pred_segments, gt_segments, k);
    acc.add(pred_segments, gt_segments);
    result.scenes.push_back(std::move(sm));
  }
  result.semantic = confusion.metrics();
  result.ap = make_ap_report(acc);
  if (config.min_ap50 && result.ap.ap50 < *config.min_ap50) result.thresholds_met = false;
  if (config.min_miou && result.semantic.miou < *config.min_miou) result.thresholds_met = false;
  return result;
}

void write_metrics_csv(const fs::path& path, const EvalResult& result) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << "scene,miou,oacc,macc,ap,ap25,ap50,ap75\n";
  auto row = [&](const std::string& name, const SemanticMetrics& s, const ApReport& a) {
    out << name << "," << fmt(s.miou) << "," << fmt(s.oacc) << "," << fmt(s.macc) << "," << fmt(a.ap)
        << "," << fmt(a.ap25) << "," << fmt(a.ap50) << "," << fmt(a.ap75) << "\n";
  };
  for (const auto& s : result.scenes) row(s.name, s.semantic, s.ap);
  row("all", result.semantic, result.ap);
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

void print_metrics_table(std::ostream& out, const EvalResult& result) {
  auto cell = [](double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << v;
    return s.str();
  };
  out << std::left << std::setw(14) << "scene" << std::right;
  for (const char* h : {"mIoU", "oAcc", "mAcc", "AP", "AP25", "AP50", "AP75"}) out << std::setw(9) << h;
  out << "\n";
  auto row = [&](const std::string& name, const SemanticMetrics& s, const ApReport& a) {
    out << std::left << std::setw(14) << name << std::right;
    for (double v : {s.miou, s.oacc, s.macc, a.ap, a.ap25, a.ap50, a.ap75}) out << std::setw(9) << cell(v);
    out << "\n";
  };
  for (const auto& s : result.scenes) row(s.name, s.semantic, s.ap);
  row("all", result.semantic, result.ap);

  out << "\n" << std::left << std::setw(14) << "class" << std::right << std::setw(9) << "IoU"
      << std::setw(9) << "AP50" << "\n";
  std::size_t ap50_index = 0;
  for (std::size_t i = 0; i < result.ap.thresholds.size(); ++i)
    if (result.ap.thresholds[i] == 0.5) ap50_index = i;
  for (std::size_t c = 0; c < result.semantic.class_iou.size(); ++c) {
    const auto& iou = result.semantic.class_iou[c];
    const auto& ap = result.ap.per_class.empty() ? std::optional<double>{} : result.ap.per_class[ap50_index][c];
    if (!iou && !ap) continue;
    out << std::left << std::setw(14) << class_name(static_cast<int>(c)) << std::right << std::setw(9)
        << (iou ? cell(*iou) : "-") << std::setw(9) << (ap ? cell(*ap) : "-") << "\n";
  }
}

void cmd_render(const PipelineConfig& config, const fs::path& scene_file, const fs::path& out_dir,
                TrainedModels* models, std::ostream& log) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create '" + out_dir.string() + "': " + ec.message());
  const std::string name = scene_file.stem().string();
  const PointCloud cloud = load_scene(scene_file);
  const BirdsEyeView view = scene_view(cloud, config);
  write_ppm(out_dir / (name + "_bev.ppm"), render_bev_colors(view));
  if (view.has_gt()) write_ppm(out_dir / (name + "_gt.ppm"), render_labels(view, view.gt_instance));
  if (models) {
    const auto bev = bev_features(models->net2d, cloud, config);
    write_ppm(out_dir / (name + "_embed.ppm"),
              render_pca(bev.view, bev.embedding_map, models->net2d.config().embedding_dim));
  }
  log << name << ": rendered " << view.height << " x " << view.width << " view\n";
}

}  // namespace bevis
