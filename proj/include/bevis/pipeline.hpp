#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "bevis/bev.hpp"
#include "bevis/config.hpp"
#include "bevis/grouping.hpp"
#include "bevis/metrics.hpp"
#include "bevis/optim.hpp"
#include "bevis/propagation.hpp"
#include "bevis/scene.hpp"
#include "bevis/unet.hpp"

namespace bevis {

struct PipelineConfig {
  std::uint64_t seed = 7;

  // dataset generation
  std::size_t num_scenes = 40;
  std::size_t min_objects = 3;
  std::size_t max_objects = 8;
  double room_min = 3.6;
  double room_max = 4.8;
  double height_min = 2.4;
  double height_max = 2.6;
  double density = 200.0;
  bool ceiling = false;
  double train_fraction = 0.8;
  double val_fraction = 0.1;

  // bird's-eye view
  RasterConfig raster{.cell_size = 0.05, .max_dim = 4096, .ground_percentile = 0.01, .ground_z = std::nullopt};
  double ceiling_fraction = 0.9;

  // 2D network
  UNetConfig unet;
  PairLossConfig pair;
  AdamConfig adam_2d;
  std::size_t steps_2d = 600;
  std::size_t batch_2d = 1;
  std::size_t eval_every_2d = 50;
  std::size_t patience_2d = 4;
  bool augment_2d = true;

  // 3D network
  PropagationConfig prop{.knn_z_scale = 0.02};
  AdamConfig adam_3d;
  std::size_t steps_3d = 1500;
  std::size_t batch_3d = 2;
  std::size_t eval_every_3d = 100;
  std::size_t patience_3d = 4;
  std::size_t val_blocks = 8;
  InferenceConfig inference;

  // grouping
  MeanShiftConfig mean_shift;
  double split_alpha = 0.25;
  ConnectivityConfig connectivity;

  // evaluation thresholds; a failed one makes `eval` exit nonzero
  std::optional<double> min_ap50;
  std::optional<double> min_miou;

  /// Starts from the defaults; unknown keys are rejected.
  static PipelineConfig from_config(const KeyValueConfig& kv);
  KeyValueConfig to_config() const;
  void validate() const;
};

/// Scene list written by `gen`: one "name split" line per scene.
struct ManifestEntry {
  std::string name;
  std::string split;  // train | val | test
};
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);
void write_manifest(const std::filesystem::path& dir, const std::vector<ManifestEntry>& entries);
std::vector<std::string> scenes_in_split(const std::vector<ManifestEntry>& entries,
                                         const std::string& split);
std::filesystem::path scene_path(const std::filesystem::path& dir, const std::string& name);

/// Scene spec of the i-th generated scene (room size, object count, seed).
SceneSpec scene_spec_for(const PipelineConfig& config, std::size_t index, std::size_t attempt = 0);

struct GenResult {
  std::vector<ManifestEntry> manifest;
};
GenResult cmd_gen(const PipelineConfig& config, const std::filesystem::path& out_dir,
                  std::ostream& log);

/// Ceiling-cut, rasterized view of a cloud (index map refers to the input
/// cloud), padded to the network alignment.
BirdsEyeView scene_view(const PointCloud& cloud, const PipelineConfig& config);

struct TrainOptions {
  bool resume = false;
};

struct TrainResult {
  std::size_t steps_run = 0;
  std::size_t final_step = 0;
  bool early_stopped = false;
  bool aborted_steps = false;
  double best_val = 0.0;
};

/// stage is "2d" or "3d". Writes net<stage>.ckpt (best validation
/// parameters), net<stage>.last.ckpt (resume state) and curve<stage>.csv.
TrainResult cmd_train(const std::string& stage, const PipelineConfig& config,
                      const std::filesystem::path& data_dir, const std::filesystem::path& run_dir,
                      const TrainOptions& options, std::ostream& log);

/// Both trained networks plus the statistics inference needs.
struct TrainedModels {
  InstanceNet2D net2d;
  PropagationNet3D net3d;
  SplitConfig split;
};
TrainedModels load_models(const PipelineConfig& config, const std::filesystem::path& run_dir);

struct ScenePipelineOutput {
  BirdsEyeView view;
  std::vector<double> embedding_map;  // view cells × D
  ScenePrediction prediction;
  std::vector<int> clusters;
  Labeling labels;  // final instances (canonical) and per-point classes
};
ScenePipelineOutput run_scene(TrainedModels& models, const PointCloud& cloud,
                              const PipelineConfig& config);

/// "point_index instance_id semantic_id" per line.
void write_predictions(const std::filesystem::path& path, const Labeling& labels);
Labeling read_predictions(const std::filesystem::path& path, std::size_t expected_points);

struct InferOptions {
  bool render = false;
  bool write_cloud = true;
};
/// Writes <name>.txt (and <name>.bevpc with features/logits) per scene, and
/// PPM renders when requested.
void cmd_infer(const PipelineConfig& config, const std::filesystem::path& run_dir,
               const std::vector<std::filesystem::path>& scene_files,
               const std::filesystem::path& out_dir, const InferOptions& options,
               std::ostream& log);

struct SceneMetrics {
  std::string name;
  SemanticMetrics semantic;
  ApReport ap;
};
struct EvalResult {
  std::vector<SceneMetrics> scenes;
  SemanticMetrics semantic;
  ApReport ap;
  bool thresholds_met = true;
};
/// Evaluates the scenes of `split` in gt_dir's manifest ("all" for every
/// scene). Predictions come from <name>.txt in pred_dir, or from the labels
/// of <name>.bevpc when no text file exists.
EvalResult cmd_eval(const PipelineConfig& config, const std::filesystem::path& pred_dir,
                    const std::filesystem::path& gt_dir, const std::string& split);
void write_metrics_csv(const std::filesystem::path& path, const EvalResult& result);
void print_metrics_table(std::ostream& out, const EvalResult& result);

/// BEV colour, GT instance and (with models) PCA embedding renders.
void cmd_render(const PipelineConfig& config, const std::filesystem::path& scene_file,
                const std::filesystem::path& out_dir, TrainedModels* models, std::ostream& log);

}  // namespace bevis
