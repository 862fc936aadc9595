#include "bevis/unet.hpp"

#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "bevis/losses.hpp"

namespace bevis {

InstanceNet2D::ConvBlock InstanceNet2D::make_block(std::size_t c_in, std::size_t c_out, Rng& rng) {
  return {Conv3x3Layer::init(c_in, c_out, rng), BatchNormLayer::init(c_out),
          Conv3x3Layer::init(c_out, c_out, rng), BatchNormLayer::init(c_out)};
}

InstanceNet2D::InstanceNet2D(const UNetConfig& config) : config_(config) {
  Rng rng(derive_seed(config.seed, 2001));
  std::size_t c = config.in_channels;
  for (std::size_t level = 0; level < 4; ++level) {
    encoder_[level] = make_block(c, config.widths[level], rng);
    c = config.widths[level];
  }
  bottleneck_ = make_block(c, c, rng);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t level = 3 - i;
    decoder_[level] = make_block(c + config.widths[level], config.widths[level], rng);
    c = config.widths[level];
  }
  instance_head_ = DenseLayer::init(c, config.embedding_dim, rng);
  semantic_head_ = DenseLayer::init(c, config.num_classes, rng);

  auto collect_block = [&](const std::string& name, const ConvBlock& b) {
    b.conv1.collect(name + ".conv1", registry_);
    b.bn1.collect(name + ".bn1", registry_);
    b.conv2.collect(name + ".conv2", registry_);
    b.bn2.collect(name + ".bn2", registry_);
  };
  for (std::size_t level = 0; level < 4; ++level) collect_block("unet.enc" + std::to_string(level), encoder_[level]);
  collect_block("unet.mid", bottleneck_);
  for (std::size_t level = 0; level < 4; ++level) collect_block("unet.dec" + std::to_string(level), decoder_[level]);
  instance_head_.collect("unet.instance_head", registry_);
  semantic_head_.collect("unet.semantic_head", registry_);
}

Tensor InstanceNet2D::run_block(ConvBlock& block, const Tensor& x) {
  Tensor y = ops::relu(block.bn1(block.conv1(x), training_));
  return ops::relu(block.bn2(block.conv2(y), training_));
}

InstanceNet2D::Output InstanceNet2D::forward(const Tensor& input) {
  if (input.rank() != 3 || input.dim(2) != config_.in_channels) {
    throw ShapeError("InstanceNet2D: expected [H, W, " + std::to_string(config_.in_channels) +
                     "] input, got " + shape_string(input.shape()));
  }
  if (input.dim(0) % kUNetAlignment || input.dim(1) % kUNetAlignment || input.dim(0) == 0 ||
      input.dim(1) == 0) {
    throw ShapeError("InstanceNet2D: spatial dims " + shape_string(input.shape()) +
                     " must be positive multiples of " + std::to_string(kUNetAlignment));
  }
  std::array<Tensor, 4> skips;
  Tensor x = input;
  for (std::size_t level = 0; level < 4; ++level) {
    skips[level] = run_block(encoder_[level], x);
    x = ops::maxpool2x2(skips[level]);
  }
  x = run_block(bottleneck_, x);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t level = 3 - i;
    x = run_block(decoder_[level], ops::concat({ops::upsample2x2(x), skips[level]}));
  }
  return {instance_head_(x), semantic_head_(x)};
}

void PairLossConfig::validate() const {
  if (!(delta_var > 0.0 && delta_var < delta_dist)) {
    throw std::invalid_argument("pair loss: need 0 < delta_var < delta_dist");
  }
  if (samples_per_instance < 2) throw std::invalid_argument("pair loss: need M >= 2");
}

double pair_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("pair_similarity: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

namespace {

struct PairSums {
  double var = 0.0;
  double dist = 0.0;
  std::size_t var_pairs = 0;
  std::size_t dist_pairs = 0;
};

/// Walks all sampled pairs. When `grad` is non-null, accumulates
/// d(var/var_pairs·g_var + dist/dist_pairs·g_dist)/dx into it.
PairSums walk_pairs(const std::vector<std::vector<std::size_t>>& groups, const double* x,
                    std::size_t d, const PairLossConfig& cfg, double* grad, double g_var,
                    double g_dist) {
  PairSums s;
  auto distance = [&](std::size_t a, std::size_t b) {
    double acc = 0.0;
    for (std::size_t t = 0; t < d; ++t) {
      const double diff = x[a * d + t] - x[b * d + t];
      acc += diff * diff;
    }
    return std::sqrt(acc);
  };
  auto push = [&](std::size_t a, std::size_t b, double dist, double coeff) {
    // coeff · d(dist)/dx_a, and the negation for x_b.
    if (dist <= 0.0) return;
    const double k = coeff / dist;
    for (std::size_t t = 0; t < d; ++t) {
      const double diff = x[a * d + t] - x[b * d + t];
      grad[a * d + t] += k * diff;
      grad[b * d + t] -= k * diff;
    }
  };
  for (const auto& g : groups) {
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t j = i + 1; j < g.size(); ++j) {
        const double dist = distance(g[i], g[j]);
        if (dist > cfg.delta_var) {
          s.var += dist - cfg.delta_var;
          if (grad) push(g[i], g[j], dist, g_var);
        }
      }
    s.var_pairs += g.size() * (g.size() - 1) / 2;
  }
  for (std::size_t gi = 0; gi < groups.size(); ++gi)
    for (std::size_t gj = gi + 1; gj < groups.size(); ++gj) {
      for (std::size_t a : groups[gi])
        for (std::size_t b : groups[gj]) {
          const double dist = distance(a, b);
          if (dist < cfg.delta_dist) {
            s.dist += cfg.delta_dist - dist;
            if (grad) push(a, b, dist, -g_dist);
          }
        }
      s.dist_pairs += groups[gi].size() * groups[gj].size();
    }
  return s;
}

}  // namespace

PairLoss instance_loss_2d(const Tensor& embeddings, std::span<const int> instance_ids,
                          const PairLossConfig& config, std::uint64_t seed) {
  config.validate();
  if (embeddings.rank() == 0) throw ShapeError("instance_loss_2d: scalar embeddings");
  const std::size_t d = embeddings.shape().back();
  const std::size_t rows = embeddings.size() / d;
  if (instance_ids.size() != rows) {
    throw ShapeError("instance_loss_2d: " + std::to_string(instance_ids.size()) + " labels for " +
                     std::to_string(rows) + " embedding rows");
  }

  // Group rows by instance in order of first appearance so that sampling
  // does not depend on the id values.
  std::unordered_map<int, std::size_t> ordinal;
  std::vector<std::vector<std::size_t>> members;
  for (std::size_t r = 0; r < rows; ++r) {
    const int id = instance_ids[r];
    if (id == kIgnoreLabel) continue;
    auto [it, inserted] = ordinal.emplace(id, members.size());
    if (inserted) members.emplace_back();
    members[it->second].push_back(r);
  }

  PairLoss out;
  if (members.empty()) {
    out.no_instances = true;
    out.total = make_op_result({1}, {0.0}, {embeddings}, [](detail::Node&) {});
    return out;
  }

  Rng rng(seed);
  std::vector<std::size_t> sampled_rows;
  auto groups = std::make_shared<std::vector<std::vector<std::size_t>>>();
  for (auto& m : members) {
    const std::size_t take = std::min(config.samples_per_instance, m.size());
    if (take < m.size()) {
      for (std::size_t i = 0; i < take; ++i) {
        const auto j = i + static_cast<std::size_t>(uniform_index(rng, m.size() - i));
        std::swap(m[i], m[j]);
      }
    }
    std::vector<std::size_t> g;
    for (std::size_t i = 0; i < take; ++i) {
      g.push_back(sampled_rows.size());
      sampled_rows.push_back(m[i]);
    }
    groups->push_back(std::move(g));
  }

  std::vector<double> packed(sampled_rows.size() * d);
  for (std::size_t s = 0; s < sampled_rows.size(); ++s)
    std::copy_n(embeddings.data().begin() + static_cast<std::ptrdiff_t>(sampled_rows[s] * d), d,
                packed.begin() + static_cast<std::ptrdiff_t>(s * d));
  const PairSums sums = walk_pairs(*groups, packed.data(), d, config, nullptr, 0.0, 0.0);

  out.var_pairs = sums.var_pairs;
  out.dist_pairs = sums.dist_pairs;
  out.var = sums.var_pairs ? sums.var / static_cast<double>(sums.var_pairs) : 0.0;
  out.dist = sums.dist_pairs ? sums.dist / static_cast<double>(sums.dist_pairs) : 0.0;
  const double var_scale = sums.var_pairs ? 1.0 / static_cast<double>(sums.var_pairs) : 0.0;
  const double dist_scale = sums.dist_pairs ? 1.0 / static_cast<double>(sums.dist_pairs) : 0.0;

  out.total = make_op_result(
      {1}, {out.var + out.dist}, {embeddings},
      [groups, sampled_rows = std::move(sampled_rows), d, config, var_scale, dist_scale](
          detail::Node& self) {
        auto& p = *self.parents[0];
        std::vector<double> packed_x(sampled_rows.size() * d);
        for (std::size_t s = 0; s < sampled_rows.size(); ++s)
          std::copy_n(p.value.begin() + static_cast<std::ptrdiff_t>(sampled_rows[s] * d), d,
                      packed_x.begin() + static_cast<std::ptrdiff_t>(s * d));
        std::vector<double> packed_g(packed_x.size(), 0.0);
        const double g = self.grad[0];
        walk_pairs(*groups, packed_x.data(), d, config, packed_g.data(), g * var_scale,
                   g * dist_scale);
        for (std::size_t s = 0; s < sampled_rows.size(); ++s)
          for (std::size_t t = 0; t < d; ++t) p.grad[sampled_rows[s] * d + t] += packed_g[s * d + t];
      });
  return out;
}

std::vector<int> valid_instance_labels(const BirdsEyeView& view) {
  if (!view.has_gt()) throw std::invalid_argument("view carries no GT rasters");
  std::vector<int> out(view.cells(), kIgnoreLabel);
  for (std::size_t c = 0; c < view.cells(); ++c)
    if (view.valid[c]) out[c] = view.gt_instance[c];
  return out;
}

std::vector<int> valid_semantic_labels(const BirdsEyeView& view) {
  if (!view.has_gt()) throw std::invalid_argument("view carries no GT rasters");
  std::vector<int> out(view.cells(), kIgnoreLabel);
  for (std::size_t c = 0; c < view.cells(); ++c)
    if (view.valid[c]) out[c] = view.gt_semantic[c];
  return out;
}

Tensor masked_view_tensor(const BirdsEyeView& view) {
  std::vector<double> data(view.channels);
  for (std::size_t c = 0; c < view.cells(); ++c)
    if (!view.valid[c])
      std::fill_n(data.begin() + static_cast<std::ptrdiff_t>(c * kBevChannels), kBevChannels, 0.0);
  return Tensor({view.height, view.width, kBevChannels}, std::move(data));
}

ViewLoss2D view_loss_2d(InstanceNet2D& net, const BirdsEyeView& view, const PairLossConfig& cfg,
                        std::span<const double> class_weights, std::uint64_t seed) {
  const auto out = net.forward(masked_view_tensor(view));
  const auto inst = instance_loss_2d(out.embedding, valid_instance_labels(view), cfg, seed);
  const auto sem_labels = valid_semantic_labels(view);
  Tensor sem = cross_entropy(out.logits, sem_labels, class_weights);
  ViewLoss2D result;
  result.total = ops::add(inst.total, sem);
  result.report.l_var = inst.var;
  result.report.l_dist = inst.dist;
  result.report.l_sem = sem.item();
  result.report.total = result.total.item();
  return result;
}

LossReport2D train_step_2d(InstanceNet2D& net, AdamState& adam,
                           std::span<const BirdsEyeView> batch, const PairLossConfig& cfg,
                           std::span<const double> class_weights, std::uint64_t seed) {
  if (batch.empty()) throw std::invalid_argument("train_step_2d: empty batch");
  auto params = net.registry().param_tensors();
  zero_grad(params);
  net.set_training(true);
  LossReport2D report;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto loss = view_loss_2d(net, batch[b], cfg, class_weights, derive_seed(seed, b));
    if (!std::isfinite(loss.report.total)) {
      report.aborted = true;
      report.total = loss.report.total;
      zero_grad(params);
      return report;
    }
    backward(ops::scale(loss.total, inv));
    report.l_var += inv * loss.report.l_var;
    report.l_dist += inv * loss.report.l_dist;
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

}  // namespace bevis
