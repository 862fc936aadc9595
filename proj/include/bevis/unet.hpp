#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "bevis/bev.hpp"
#include "bevis/layers.hpp"
#include "bevis/optim.hpp"
#include "bevis/scene.hpp"

namespace bevis {

struct UNetConfig {
  std::size_t in_channels = kBevChannels;
  std::size_t embedding_dim = 8;
  std::size_t num_classes = kNumClasses;
  std::array<std::size_t, 4> widths{16, 32, 64, 128};
  std::uint64_t seed = 0;
};

/// Spatial dims the network accepts must be multiples of this.
inline constexpr std::size_t kUNetAlignment = 16;

/// U-shaped FCN over a bird's-eye view: four 2× downsampling stages with
/// skip connections into a mirrored decoder, then 1×1 instance and semantic
/// heads.
class InstanceNet2D {
 public:
  explicit InstanceNet2D(const UNetConfig& config);

  struct Output {
    Tensor embedding;  // [H, W, D]
    Tensor logits;     // [H, W, K]
  };

  /// input is [H, W, in_channels] with H, W multiples of kUNetAlignment.
  Output forward(const Tensor& input);

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }
  const UNetConfig& config() const { return config_; }
  const ParameterRegistry& registry() const { return registry_; }

 private:
  struct ConvBlock {
    Conv3x3Layer conv1;
    BatchNormLayer bn1;
    Conv3x3Layer conv2;
    BatchNormLayer bn2;
  };
  static ConvBlock make_block(std::size_t c_in, std::size_t c_out, Rng& rng);
  Tensor run_block(ConvBlock& block, const Tensor& x);

  UNetConfig config_;
  std::array<ConvBlock, 4> encoder_;
  ConvBlock bottleneck_;
  std::array<ConvBlock, 4> decoder_;
  DenseLayer instance_head_;
  DenseLayer semantic_head_;
  ParameterRegistry registry_;
  bool training_ = true;
};

struct PairLossConfig {
  double delta_var = 0.5;
  double delta_dist = 1.5;
  std::size_t samples_per_instance = 100;

  void validate() const;
};

/// Euclidean distance; smaller means more similar.
double pair_similarity(std::span<const double> a, std::span<const double> b);

struct PairLoss {
  Tensor total;  // scalar: var + dist
  double var = 0.0;
  double dist = 0.0;
  std::size_t var_pairs = 0;
  std::size_t dist_pairs = 0;
  bool no_instances = false;  // nothing visible; loss defined as 0
};

/// Discriminative hinge loss over sampled pixel pairs. embeddings is [..., D];
/// instance_ids gives one id per row, kIgnoreLabel rows are skipped. Each
/// instance (taken in order of first appearance) contributes min(M, count)
/// samples; both hinge sums are divided by their pair counts.
PairLoss instance_loss_2d(const Tensor& embeddings, std::span<const int> instance_ids,
                          const PairLossConfig& config, std::uint64_t seed);

/// Per-cell instance / semantic labels with kIgnoreLabel on invalid cells.
std::vector<int> valid_instance_labels(const BirdsEyeView& view);
std::vector<int> valid_semantic_labels(const BirdsEyeView& view);
/// Network input with invalid cells forced to zero.
Tensor masked_view_tensor(const BirdsEyeView& view);

struct LossReport2D {
  double l_var = 0.0;
  double l_dist = 0.0;
  double l_sem = 0.0;
  double total = 0.0;
  bool aborted = false;  // non-finite loss or gradient, no update applied
};

/// Loss of one view (unit weights between the two branches); no update.
struct ViewLoss2D {
  Tensor total;
  LossReport2D report;
};
ViewLoss2D view_loss_2d(InstanceNet2D& net, const BirdsEyeView& view, const PairLossConfig& cfg,
                        std::span<const double> class_weights, std::uint64_t seed);

/// Zeroes gradients, accumulates the mean loss over the batch, applies one
/// Adam step. Views must be aligned to kUNetAlignment and carry GT.
LossReport2D train_step_2d(InstanceNet2D& net, AdamState& adam,
                           std::span<const BirdsEyeView> batch, const PairLossConfig& cfg,
                           std::span<const double> class_weights, std::uint64_t seed);

}  // namespace bevis
