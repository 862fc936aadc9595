#include "bevis/propagation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "bevis/losses.hpp"

namespace bevis {

Tensor edge_conv(const Tensor& x, const KnnGraph& graph, const Tensor& w_self,
                 const Tensor& w_diff, const Tensor& b) {
  if (graph.size() != x.dim(0)) {
    throw ShapeError("edge_conv: graph has " + std::to_string(graph.size()) + " rows for " +
                     shape_string(x.shape()) + " features");
  }
  const Tensor p = ops::dense(x, w_self, b);
  const Tensor q = ops::dense(x, w_diff, Tensor());
  return ops::max_over_neighbors(ops::edge_combine(p, q, graph.neighbors, graph.k), graph.k);
}

PropagationNet3D::PropagationNet3D(const PropagationConfig& config) : config_(config) {
  Rng rng(derive_seed(config.seed, 3001));
  std::size_t c = config.input_dim();
  std::size_t concat_width = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t w = config.edge_widths[i];
    edges_[i] = {DenseLayer::init(c, w, rng), DenseLayer::init(c, w, rng, false),
                 BatchNormLayer::init(w)};
    c = w;
    concat_width += w;
  }
  global_ = DenseLayer::init(concat_width, config.global_width, rng);
  global_bn_ = BatchNormLayer::init(config.global_width);
  fuse_ = DenseLayer::init(concat_width + config.global_width, config.head_width, rng);
  fuse_bn_ = BatchNormLayer::init(config.head_width);
  instance_head_ = DenseLayer::init(config.head_width, config.embedding_dim, rng);
  semantic_head_ = DenseLayer::init(config.head_width, config.num_classes, rng);

  for (std::size_t i = 0; i < 3; ++i) {
    const std::string name = "prop.edge" + std::to_string(i);
    edges_[i].self.collect(name + ".self", registry_);
    edges_[i].diff.collect(name + ".diff", registry_);
    edges_[i].bn.collect(name + ".bn", registry_);
  }
  global_.collect("prop.global", registry_);
  global_bn_.collect("prop.global_bn", registry_);
  fuse_.collect("prop.fuse", registry_);
  fuse_bn_.collect("prop.fuse_bn", registry_);
  instance_head_.collect("prop.instance_head", registry_);
  semantic_head_.collect("prop.semantic_head", registry_);
}

PropagationNet3D::Output PropagationNet3D::forward(const Tensor& x, const KnnGraph& graph) {
  if (x.rank() != 2 || x.dim(1) != config_.input_dim()) {
    throw ShapeError("PropagationNet3D: expected [N, " + std::to_string(config_.input_dim()) +
                     "] input, got " + shape_string(x.shape()));
  }
  if (graph.size() != x.dim(0)) throw ShapeError("PropagationNet3D: graph size mismatch");
  // Each block is normalized with its own statistics in both modes; the
  // running buffers only track them during training.
  const auto norm = [this](BatchNormLayer& bn, const Tensor& t) { return bn(t, true, training_); };
  std::vector<Tensor> levels;
  Tensor h = x;
  for (auto& layer : edges_) {
    const Tensor p = layer.self(h);
    const Tensor q = layer.diff(h);
    Tensor e = ops::relu(norm(layer.bn, ops::edge_combine(p, q, graph.neighbors, graph.k)));
    h = ops::max_over_neighbors(e, graph.k);
    levels.push_back(h);
  }
  const Tensor local = ops::concat(levels);
  const Tensor g = ops::relu(norm(global_bn_, global_(local)));
  Tensor f = ops::relu(norm(fuse_bn_, fuse_(ops::concat({local, ops::broadcast_row_max(g)}))));
  return {instance_head_(f), semantic_head_(f)};
}

AugmentedPointSet concat_bev_features(const PointCloud& cloud, const PointFeatures& bev) {
  const std::size_t n = cloud.size();
  if (bev.assigned.size() != n) throw ShapeError("concat_bev_features: point count mismatch");
  AugmentedPointSet out;
  out.dim = kPointFeatures + bev.dim;
  out.features.assign(n * out.dim, 0.0);
  out.seen = bev.assigned;
  for (std::size_t i = 0; i < n; ++i) {
    double* row = &out.features[i * out.dim];
    std::copy_n(&cloud.points[i * kPointFeatures], kPointFeatures, row);
    if (bev.assigned[i]) std::copy_n(&bev.values[i * bev.dim], bev.dim, row + kPointFeatures);
  }
  return out;
}

TargetFeatures compute_targets(const PointFeatures& bev, std::span<const int> gt_instance) {
  const std::size_t n = bev.assigned.size();
  if (gt_instance.size() != n) throw ShapeError("compute_targets: label count mismatch");
  const std::size_t d = bev.dim;
  std::unordered_map<int, std::size_t> slot;
  std::vector<std::vector<double>> sums;
  std::vector<std::size_t> counts;
  for (std::size_t i = 0; i < n; ++i) {
    if (!bev.assigned[i] || gt_instance[i] < 0) continue;
    auto [it, inserted] = slot.emplace(gt_instance[i], sums.size());
    if (inserted) {
      sums.emplace_back(d, 0.0);
      counts.push_back(0);
    }
    auto& s = sums[it->second];
    for (std::size_t t = 0; t < d; ++t) s[t] += bev.values[i * d + t];
    ++counts[it->second];
  }
  TargetFeatures out;
  out.dim = d;
  out.targets.assign(n * d, 0.0);
  out.defined.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    auto it = slot.find(gt_instance[i]);
    if (it == slot.end()) continue;
    const auto& s = sums[it->second];
    const double inv = 1.0 / static_cast<double>(counts[it->second]);
    for (std::size_t t = 0; t < d; ++t) out.targets[i * d + t] = s[t] * inv;
    out.defined[i] = 1;
  }
  return out;
}

InstanceLoss3D instance_loss_3d(const Tensor& predicted, std::span<const double> targets,
                                std::span<const std::uint8_t> defined) {
  if (predicted.rank() != 2) throw ShapeError("instance_loss_3d: predictions must be [N, D]");
  const std::size_t n = predicted.dim(0);
  const std::size_t d = predicted.dim(1);
  if (targets.size() != n * d || defined.size() != n) {
    throw ShapeError("instance_loss_3d: targets do not match " + shape_string(predicted.shape()));
  }
  InstanceLoss3D out;
  std::vector<double> dist(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!defined[i]) continue;
    double s = 0.0;
    for (std::size_t t = 0; t < d; ++t) {
      const double diff = predicted.data()[i * d + t] - targets[i * d + t];
      s += diff * diff;
    }
    dist[i] = std::sqrt(s);
    total += dist[i];
    ++out.defined_rows;
  }
  if (out.defined_rows == 0) {
    out.empty = true;
    out.value = make_op_result({1}, {0.0}, {predicted}, [](detail::Node&) {});
    return out;
  }
  const double inv = 1.0 / static_cast<double>(out.defined_rows);
  auto target_copy = std::make_shared<std::vector<double>>(targets.begin(), targets.end());
  auto mask = std::make_shared<std::vector<std::uint8_t>>(defined.begin(), defined.end());
  out.value = make_op_result(
      {1}, {total * inv}, {predicted},
      [target_copy, mask, dist = std::move(dist), d, inv](detail::Node& self) {
        auto& p = *self.parents[0];
        const double g = self.grad[0] * inv;
        for (std::size_t i = 0; i < mask->size(); ++i) {
          if (!(*mask)[i] || dist[i] <= 0.0) continue;
          const double k = g / dist[i];
          for (std::size_t t = 0; t < d; ++t)
            p.grad[i * d + t] += k * (p.value[i * d + t] - (*target_copy)[i * d + t]);
        }
      });
  return out;
}

namespace {

std::vector<std::size_t> cylinder_members(const PointCloud& cloud, std::array<double, 2> c,
                                          double diameter) {
  const double r = 0.5 * diameter;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const double dx = cloud.x(i) - c[0];
    const double dy = cloud.y(i) - c[1];
    if (dx * dx + dy * dy <= r * r) out.push_back(i);
  }
  return out;
}

}  // namespace

std::vector<std::size_t> sample_block(const PointCloud& cloud, std::array<double, 2> center_xy,
                                      double diameter, std::size_t n, std::uint64_t seed) {
  if (!(diameter > 0.0)) throw std::invalid_argument("sample_block: diameter must be positive");
  if (n == 0) throw std::invalid_argument("sample_block: n must be positive");
  auto members = cylinder_members(cloud, center_xy, diameter);
  if (members.empty()) throw std::invalid_argument("sample_block: empty cylinder");
  Rng rng(seed);
  std::vector<std::size_t> out(n);
  if (members.size() >= n) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = i + static_cast<std::size_t>(uniform_index(rng, members.size() - i));
      std::swap(members[i], members[j]);
      out[i] = members[i];
    }
  } else {
    for (auto& v : out) v = members[uniform_index(rng, members.size())];
  }
  return out;
}

Block3D make_block(const PointCloud& cloud, const AugmentedPointSet& points,
                   std::vector<std::size_t> indices, std::array<double, 2> center_xy,
                   std::size_t k, double z_scale) {
  if (points.size() != cloud.size()) throw ShapeError("make_block: point set mismatch");
  if (!(z_scale > 0.0) || !std::isfinite(z_scale)) throw std::invalid_argument("make_block: bad z scale");
  {
    std::unordered_set<std::size_t> seen;
    std::size_t kept = 0;
    for (std::size_t i : indices)
      if (seen.insert(i).second) indices[kept++] = i;
    indices.resize(kept);
  }
  if (indices.size() < 2) throw std::invalid_argument("make_block: block needs two distinct points");
  k = std::min(k, indices.size() - 1);
  const std::size_t dim = points.dim;
  std::vector<double> x(indices.size() * dim);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const double* src = &points.features[indices[r] * dim];
    double* dst = &x[r * dim];
    std::copy_n(src, dim, dst);
    dst[0] -= center_xy[0];
    dst[1] -= center_xy[1];
  }
  Block3D block;
  if (z_scale == 1.0) {
    block.graph = build_knn(x, dim, k);
  } else {
    std::vector<double> xyz(indices.size() * 3);
    for (std::size_t r = 0; r < indices.size(); ++r) {
      xyz[r * 3] = x[r * dim];
      xyz[r * 3 + 1] = x[r * dim + 1];
      xyz[r * 3 + 2] = x[r * dim + 2] * z_scale;
    }
    block.graph = build_knn(xyz, 3, k);
  }
  block.input = Tensor({indices.size(), dim}, std::move(x));
  block.indices = std::move(indices);
  return block;
}

TrainingBlock make_training_block(const PointCloud& cloud, const AugmentedPointSet& points,
                                  const TargetFeatures& targets, std::vector<std::size_t> indices,
                                  std::array<double, 2> center_xy, std::size_t k,
                                  double z_scale) {
  if (!cloud.has_labels()) throw std::invalid_argument("make_training_block: cloud has no labels");
  TrainingBlock tb;
  tb.block = make_block(cloud, points, std::move(indices), center_xy, k, z_scale);
  const std::size_t d = targets.dim;
  for (std::size_t i : tb.block.indices) {
    tb.targets.insert(tb.targets.end(), targets.targets.begin() + static_cast<std::ptrdiff_t>(i * d),
                      targets.targets.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    tb.defined.push_back(targets.defined[i]);
    tb.semantic.push_back((*cloud.gt_semantic)[i]);
  }
  return tb;
}

BlockLoss3D block_loss_3d(PropagationNet3D& net, const TrainingBlock& block,
                          std::span<const double> class_weights) {
  const auto out = net.forward(block.block.input, block.block.graph);
  const auto inst = instance_loss_3d(out.features, block.targets, block.defined);
  Tensor sem = cross_entropy(out.logits, block.semantic, class_weights);
  BlockLoss3D result;
  result.total = ops::add(inst.value, sem);
  result.report.l_inst = inst.value.item();
  result.report.l_sem = sem.item();
  result.report.total = result.total.item();
  return result;
}

LossReport3D train_step_3d(PropagationNet3D& net, AdamState& adam,
                           std::span<const TrainingBlock> batch,
                           std::span<const double> class_weights) {
  if (batch.empty()) throw std::invalid_argument("train_step_3d: empty batch");
  auto params = net.registry().param_tensors();
  zero_grad(params);
  net.set_training(true);
  LossReport3D report;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& block : batch) {
    auto loss = block_loss_3d(net, block, class_weights);
    if (!std::isfinite(loss.report.total)) {
      report.aborted = true;
      report.total = loss.report.total;
      zero_grad(params);
      return report;
    }
    backward(ops::scale(loss.total, inv));
    report.l_inst += inv * loss.report.l_inst;
    report.l_sem += inv * loss.report.l_sem;
    report.total += inv * loss.report.total;
  }
  try {
    adam_step(adam, params);
  } catch (const NonFiniteError&) {
    report.aborted = true;
    zero_grad(params);
  }
  return report;
}

namespace {

std::size_t nearest_other(const PointCloud& cloud, std::size_t i) {
  std::size_t best = i == 0 ? 1 : 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < cloud.size(); ++j) {
    if (j == i) continue;
    const double dx = cloud.x(j) - cloud.x(i), dy = cloud.y(j) - cloud.y(i), dz = cloud.z(j) - cloud.z(i);
    const double d = dx * dx + dy * dy + dz * dz;
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

}  // namespace

ScenePrediction infer_full_scene(PropagationNet3D& net, const PointCloud& cloud,
                                 const AugmentedPointSet& points, const InferenceConfig& config) {
  if (!(config.diameter > 0.0)) throw std::invalid_argument("infer_full_scene: bad diameter");
  const auto& cfg = net.config();
  if (config.block_points <= cfg.k) {
    throw std::invalid_argument("infer_full_scene: block_points must exceed k");
  }
  const std::size_t n = cloud.size();
  const std::size_t d = cfg.embedding_dim;
  const std::size_t kc = cfg.num_classes;
  ScenePrediction pred;
  pred.feature_dim = d;
  pred.num_classes = kc;
  pred.features.assign(n * d, 0.0);
  pred.logits.assign(n * kc, 0.0);
  pred.coverage.assign(n, 0);
  if (n == 0) return pred;
  if (n < 2) throw std::invalid_argument("infer_full_scene: needs at least two points");

  double lo[2] = {cloud.x(0), cloud.y(0)}, hi[2] = {lo[0], lo[1]};
  for (std::size_t i = 1; i < n; ++i) {
    lo[0] = std::min(lo[0], cloud.x(i));
    hi[0] = std::max(hi[0], cloud.x(i));
    lo[1] = std::min(lo[1], cloud.y(i));
    hi[1] = std::max(hi[1], cloud.y(i));
  }
  const double stride = 0.5 * config.diameter;
  std::vector<std::array<double, 2>> centers;
  const std::array<double, 2> middle{0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])};
  if (cylinder_members(cloud, middle, config.diameter).size() == n) {
    centers.push_back(middle);
  } else {
    const auto steps_x = static_cast<std::size_t>(std::ceil((hi[0] - lo[0]) / stride)) + 1;
    const auto steps_y = static_cast<std::size_t>(std::ceil((hi[1] - lo[1]) / stride)) + 1;
    for (std::size_t by = 0; by < steps_y; ++by)
      for (std::size_t bx = 0; bx < steps_x; ++bx)
        centers.push_back({lo[0] + static_cast<double>(bx) * stride, lo[1] + static_cast<double>(by) * stride});
  }

  const bool was_training = net.training();
  net.set_training(false);
  const std::size_t bp = config.block_points;
  for (std::size_t b = 0; b < centers.size(); ++b) {
    const auto& center = centers[b];
    auto members = cylinder_members(cloud, center, config.diameter);
    if (members.empty()) continue;
    if (members.size() == 1) members.push_back(nearest_other(cloud, members[0]));
    const std::size_t chunks = (members.size() + bp - 1) / bp;
    if (chunks > 1) {
      Rng rng(derive_seed(config.seed, b));
      for (std::size_t i = members.size(); i > 1; --i)
        std::swap(members[i - 1], members[uniform_index(rng, i)]);
    }
    for (std::size_t c = 0; c < chunks; ++c) {
      const std::size_t begin = c * members.size() / chunks;
      const std::size_t end = (c + 1) * members.size() / chunks;
      std::vector<std::size_t> idx(members.begin() + static_cast<std::ptrdiff_t>(begin),
                                   members.begin() + static_cast<std::ptrdiff_t>(end));
      const auto block = make_block(cloud, points, std::move(idx), center, cfg.k, cfg.knn_z_scale);
      const auto out = net.forward(block.input, block.graph);
      for (std::size_t r = 0; r < block.indices.size(); ++r) {
        const std::size_t i = block.indices[r];
        for (std::size_t t = 0; t < d; ++t) pred.features[i * d + t] += out.features.data()[r * d + t];
        for (std::size_t t = 0; t < kc; ++t) pred.logits[i * kc + t] += out.logits.data()[r * kc + t];
        ++pred.coverage[i];
      }
    }
  }
  net.set_training(was_training);
  for (std::size_t i = 0; i < n; ++i) {
    if (pred.coverage[i] == 0) throw std::logic_error("infer_full_scene: uncovered point");
    const double inv = 1.0 / pred.coverage[i];
    for (std::size_t t = 0; t < d; ++t) pred.features[i * d + t] *= inv;
    for (std::size_t t = 0; t < kc; ++t) pred.logits[i * kc + t] *= inv;
  }
  return pred;
}

}  // namespace bevis
