#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "bevis/bev.hpp"
#include "bevis/knn.hpp"
#include "bevis/layers.hpp"
#include "bevis/optim.hpp"
#include "bevis/scene.hpp"

namespace bevis {

struct PropagationConfig {
  std::size_t point_features = kPointFeatures;
  std::size_t embedding_dim = 8;
  std::size_t num_classes = kNumClasses;
  std::size_t k = 20;
  std::array<std::size_t, 3> edge_widths{64, 64, 64};
  std::size_t global_width = 128;  // block-wide max-pooled context
  double knn_z_scale = 1.0;
  std::size_t head_width = 64;
  std::uint64_t seed = 0;

  std::size_t input_dim() const { return point_features + embedding_dim; }
};

/// Linear edge function on concat(x_i, x_j − x_i), max over the k neighbours.
/// w_self and w_diff are [C, C']; b may be undefined.
Tensor edge_conv(const Tensor& x, const KnnGraph& graph, const Tensor& w_self,
                 const Tensor& w_diff, const Tensor& b);

/// Stack of three EdgeConv layers (linear, batch norm, ReLU, max) whose
/// outputs are concatenated into a per-point dense layer with instance
/// feature and semantic heads.
class PropagationNet3D {
 public:
  explicit PropagationNet3D(const PropagationConfig& config);

  struct Output {
    Tensor features;  // [N, D]
    Tensor logits;    // [N, K]
  };

  /// x is [N, input_dim]; graph must have N rows.
  Output forward(const Tensor& x, const KnnGraph& graph);

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }
  const PropagationConfig& config() const { return config_; }
  const ParameterRegistry& registry() const { return registry_; }

 private:
  struct EdgeLayer {
    DenseLayer self;
    DenseLayer diff;
    BatchNormLayer bn;
  };

  PropagationConfig config_;
  std::array<EdgeLayer, 3> edges_;
  DenseLayer global_;
  BatchNormLayer global_bn_;
  DenseLayer fuse_;
  BatchNormLayer fuse_bn_;
  DenseLayer instance_head_;
  DenseLayer semantic_head_;
  ParameterRegistry registry_;
  bool training_ = true;
};

/// Point features concatenated with unprojected BEV instance features; rows
/// of unseen points carry zeros in the trailing embedding columns.
struct AugmentedPointSet {
  std::size_t dim = 0;
  std::vector<double> features;  // N × dim
  std::vector<std::uint8_t> seen;

  std::size_t size() const { return seen.size(); }
};

AugmentedPointSet concat_bev_features(const PointCloud& cloud, const PointFeatures& bev);

struct TargetFeatures {
  std::size_t dim = 0;
  std::vector<double> targets;  // N × dim
  std::vector<std::uint8_t> defined;
};

/// Per GT instance, the mean of its visible points' BEV features; instances
/// with no visible point stay undefined.
TargetFeatures compute_targets(const PointFeatures& bev, std::span<const int> gt_instance);

struct InstanceLoss3D {
  Tensor value;  // scalar
  std::size_t defined_rows = 0;
  bool empty = false;  // no defined target; value is 0
};

/// Mean Euclidean distance between predicted and target rows over defined rows.
InstanceLoss3D instance_loss_3d(const Tensor& predicted, std::span<const double> targets,
                                std::span<const std::uint8_t> defined);

/// n indices of points within diameter/2 of center_xy (xy distance): drawn
/// without replacement when there are at least n, otherwise with replacement.
/// Throws if the cylinder is empty.
std::vector<std::size_t> sample_block(const PointCloud& cloud, std::array<double, 2> center_xy,
                                      double diameter, std::size_t n, std::uint64_t seed);

/// Network input for a block: xy relative to the block centre.
struct Block3D {
  std::vector<std::size_t> indices;
  Tensor input;  // [n, input_dim]
  KnnGraph graph;
};

/// Repeated indices are dropped (first occurrence kept), so every row is a
/// distinct point. The kNN graph is built on (x, y, z_scale·z); z_scale < 1
/// links points stacked in the same column, which the bird's-eye view hides.
/// With fewer than k + 1 distinct points the graph uses all of them.
Block3D make_block(const PointCloud& cloud, const AugmentedPointSet& points,
                   std::vector<std::size_t> indices, std::array<double, 2> center_xy,
                   std::size_t k, double z_scale = 1.0);

struct LossReport3D {
  double l_inst = 0.0;
  double l_sem = 0.0;
  double total = 0.0;
  bool aborted = false;
};

struct TrainingBlock {
  Block3D block;
  std::vector<double> targets;        // n × D
  std::vector<std::uint8_t> defined;  // n
  std::vector<int> semantic;          // n
};

TrainingBlock make_training_block(const PointCloud& cloud, const AugmentedPointSet& points,
                                  const TargetFeatures& targets, std::vector<std::size_t> indices,
                                  std::array<double, 2> center_xy, std::size_t k,
                                  double z_scale = 1.0);

struct BlockLoss3D {
  Tensor total;
  LossReport3D report;
};
BlockLoss3D block_loss_3d(PropagationNet3D& net, const TrainingBlock& block,
                          std::span<const double> class_weights);

/// Zeroes gradients, averages the 1:1 instance + semantic loss over the batch
/// and applies one Adam step.
LossReport3D train_step_3d(PropagationNet3D& net, AdamState& adam,
                           std::span<const TrainingBlock> batch,
                           std::span<const double> class_weights);

struct InferenceConfig {
  double diameter = 1.0;
  std::size_t block_points = 1024;
  std::uint64_t seed = 0;
};

struct ScenePrediction {
  std::size_t feature_dim = 0;
  std::size_t num_classes = 0;
  std::vector<double> features;  // N × D
  std::vector<double> logits;    // N × K
  std::vector<std::uint32_t> coverage;
};

/// Tiles the scene with cylinders on a square grid of stride diameter/2 and
/// averages each point's outputs over the blocks that contain it. A scene
/// that fits one cylinder around its xy bounding-box centre is a single block. Crowded
/// cylinders are split into random chunks of at most block_points; a
/// cylinder holding a single point borrows its nearest neighbour.
ScenePrediction infer_full_scene(PropagationNet3D& net, const PointCloud& cloud,
                                 const AugmentedPointSet& points, const InferenceConfig& config);

}  // namespace bevis
