#include "gradient_suite.hpp"

#include <cmath>

#include "bevis/knn.hpp"
#include "bevis/layers.hpp"
#include "bevis/losses.hpp"
#include "bevis/ops.hpp"
#include "bevis/propagation.hpp"
#include "bevis/unet.hpp"

namespace bevis::testing {
namespace {

// Entries bounded away from zero, so ReLU kinks sit far from the probes.
Tensor off_zero(Shape shape, Rng& rng) {
  auto t = random_tensor(std::move(shape), rng, 0.1, 1.0);
  for (auto& v : t.mutable_data())
    if (rng() & 1) v = -v;
  return t;
}

KnnGraph random_graph(const Tensor& xyz_rows, std::size_t stride, std::size_t k) {
  return build_knn(xyz_rows.data(), stride, k);
}

std::vector<int> random_labels(std::size_t n, int num_classes, Rng& rng) {
  std::vector<int> out(n);
  for (auto& v : out) v = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(num_classes)));
  return out;
}

}  // namespace

std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;
  auto add = [&](std::string name, std::function<GradCheck(std::uint64_t)> fn) {
    cases.push_back({std::move(name), std::move(fn)});
  };

  add("elementwise", [](std::uint64_t seed) {
    Rng rng(seed);
    auto a = random_tensor({4, 3}, rng), b = random_tensor({4, 3}, rng);
    return grad_check([&] { return ops::mean(ops::mul(ops::scale(ops::add(a, b), 1.5), ops::sub(a, b))); },
                      {a, b}, rng);
  });
  add("dense", [](std::uint64_t seed) {
    Rng rng(seed);
    auto x = random_tensor({5, 4}, rng), w = random_tensor({4, 3}, rng), b = random_tensor({3}, rng);
    return grad_check([&] { return project(ops::dense(x, w, b), seed); }, {x, w, b}, rng);
  });
  add("conv3x3", [](std::uint64_t seed) {
    Rng rng(seed);
    auto x = random_tensor({5, 6, 3}, rng), w = random_tensor({3, 3, 3, 4}, rng);
    auto b = random_tensor({4}, rng);
    return grad_check([&] { return project(ops::conv3x3(x, w, b), seed); }, {x, w, b}, rng);
  });
  add("relu", [](std::uint64_t seed) {
    Rng rng(seed);
    auto x = off_zero({6, 4}, rng);
    return grad_check([&] { return project(ops::relu(x), seed); }, {x}, rng);
  });
  add("batch_norm_train", [](std::uint64_t seed) {
    Rng rng(seed);
    auto x = random_tensor({7, 5}, rng), g = random_tensor({5}, rng, 0.5, 1.5);
    auto b = random_tensor({5}, rng);
    auto layer = BatchNormLayer::init(5);
    return grad_check([&] { return project(ops::batch_norm(x, g, b, layer.buffers, true), seed); },
                      {x, g, b}, rng);
  });
  add("batch_norm_eval", [](std::uint64_t seed) {
    Rng rng(seed);
    auto x = random_tensor({7, 5}, rng), g = random_tensor({5}, rng, 0.5, 1.5);
    auto b = random_tensor({5}, rng);
    auto layer = BatchNormLayer::init(5);
    layer.buffers.running_mean = random_tensor({5}, rng, -0.5, 0.5, false);
    layer.buffers.running_var = random_tensor({5}, rng, 0.5, 2.0, false);
    return grad_check([&] { return project(ops::batch_norm(x, g, b, layer.buffers, false), seed); },
                      {x, g, b}, rng);
  });
  add("maxpool2x2", [](std::uint64_t seed) {
    Rng rng(seed);
    auto x = random_tensor({4, 6, 3}, rng);
    return grad_check([&] { return project(ops::maxpool2x2(x), seed); }, {x}, rng);
  });
  add("upsample2x2", [](std::uint64_t seed) {
    Rng rng(seed);
    auto x = random_tensor({3, 2, 2}, rng);
    return grad_check([&] { return project(ops::upsample2x2(x), seed); }, {x}, rng);
  });
  add("concat", [](std::uint64_t seed) {
    Rng rng(seed);
    auto a = random_tensor({3, 2, 2}, rng), b = random_tensor({3, 2, 3}, rng);
    return grad_check([&] { return project(ops::concat({a, b}), seed); }, {a, b}, rng);
  });
  add("softmax", [](std::uint64_t seed) {
    Rng rng(seed);
    auto x = random_tensor({4, 5}, rng, -2.0, 2.0);
    return grad_check([&] { return project(ops::softmax(x), seed); }, {x}, rng);
  });
  add("max_over_neighbors", [](std::uint64_t seed) {
    Rng rng(seed);
    auto e = random_tensor({12, 3}, rng);
    return grad_check([&] { return project(ops::max_over_neighbors(e, 4), seed); }, {e}, rng);
  });
  add("broadcast_row_max", [](std::uint64_t seed) {
    Rng rng(seed);
    auto x = random_tensor({6, 3}, rng);
    return grad_check([&] { return project(ops::broadcast_row_max(x), seed); }, {x}, rng);
  });
  add("edge_combine", [](std::uint64_t seed) {
    Rng rng(seed);
    auto p = random_tensor({6, 3}, rng), q = random_tensor({6, 3}, rng);
    std::vector<std::size_t> nbr(6 * 2);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t m = 0; m < 2; ++m) nbr[i * 2 + m] = (i + 1 + m) % 6;
    return grad_check([&] { return project(ops::edge_combine(p, q, nbr, 2), seed); }, {p, q}, rng);
  });
  add("edge_concat", [](std::uint64_t seed) {
    Rng rng(seed);
    auto x = random_tensor({6, 3}, rng);
    std::vector<std::size_t> nbr(6 * 2);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t m = 0; m < 2; ++m) nbr[i * 2 + m] = (i + 2 + m) % 6;
    return grad_check([&] { return project(ops::edge_concat(x, nbr, 2), seed); }, {x}, rng);
  });
  add("edge_conv", [](std::uint64_t seed) {
    Rng rng(seed);
    auto x = random_tensor({10, 4}, rng);
    const auto graph = random_graph(x, 4, 3);
    auto ws = random_tensor({4, 5}, rng), wd = random_tensor({4, 5}, rng), b = random_tensor({5}, rng);
    return grad_check([&] { return project(edge_conv(x, graph, ws, wd, b), seed); }, {x, ws, wd, b},
                      rng);
  });
  add("cross_entropy", [](std::uint64_t seed) {
    Rng rng(seed);
    auto logits = random_tensor({12, 4}, rng, -2.0, 2.0);
    const auto labels = random_labels(12, 4, rng);
    const auto weights = class_weights_from_labels(labels, 4);
    return grad_check([&] { return cross_entropy(logits, labels, weights); }, {logits}, rng);
  });
  add("l_var", [](std::uint64_t seed) {
    Rng rng(seed);
    auto e = random_tensor({10, 3}, rng);
    std::vector<int> ids(10, 4);
    ids[3] = kIgnoreLabel;
    return grad_check([&] { return instance_loss_2d(e, ids, {}, seed).total; }, {e}, rng);
  });
  add("l_dist", [](std::uint64_t seed) {
    Rng rng(seed);
    auto e = random_tensor({6, 3}, rng, -0.5, 0.5);
    const std::vector<int> ids{0, 1, 2, 3, 4, 5};
    return grad_check([&] { return instance_loss_2d(e, ids, {}, seed).total; }, {e}, rng);
  });
  add("l_var_plus_l_dist", [](std::uint64_t seed) {
    Rng rng(seed);
    auto e = random_tensor({4, 5, 3}, rng);
    std::vector<int> ids(20);
    for (auto& v : ids) v = static_cast<int>(uniform_index(rng, 4)) - 1;
    ids[0] = 0;
    ids[1] = 1;
    PairLossConfig cfg;
    cfg.samples_per_instance = 4;
    return grad_check([&] { return instance_loss_2d(e, ids, cfg, seed).total; }, {e}, rng);
  });
  add("target_loss_3d", [](std::uint64_t seed) {
    Rng rng(seed);
    auto pred = random_tensor({8, 3}, rng);
    std::vector<double> targets(8 * 3);
    for (auto& v : targets) v = uniform(rng, 1.5, 2.5);
    std::vector<std::uint8_t> defined(8, 1);
    defined[2] = defined[5] = 0;
    return grad_check([&] { return instance_loss_3d(pred, targets, defined).value; }, {pred}, rng);
  });
  add("unet", [](std::uint64_t seed) {
    Rng rng(seed);
    UNetConfig cfg;
    cfg.embedding_dim = 3;
    cfg.num_classes = 3;
    cfg.widths = {2, 3, 3, 4};
    cfg.seed = seed;
    InstanceNet2D net(cfg);
    auto x = random_tensor({32, 16, kBevChannels}, rng);
    auto wrt = net.registry().param_tensors();
    wrt.push_back(x);
    return grad_check(
        [&] {
          const auto out = net.forward(x);
          return ops::add(project(out.embedding, seed), project(out.logits, seed + 1));
        },
        wrt, rng, 3);
  });
  add("propagation_net", [](std::uint64_t seed) {
    Rng rng(seed);
    PropagationConfig cfg;
    cfg.embedding_dim = 3;
    cfg.num_classes = 3;
    cfg.k = 4;
    cfg.edge_widths = {4, 4, 4};
    cfg.global_width = 4;
    cfg.head_width = 4;
    cfg.seed = seed;
    PropagationNet3D net(cfg);
    auto x = random_tensor({24, cfg.input_dim()}, rng);
    const auto graph = random_graph(x, cfg.input_dim(), cfg.k);
    auto wrt = net.registry().param_tensors();
    wrt.push_back(x);
    return grad_check(
        [&] {
          const auto out = net.forward(x, graph);
          return ops::add(project(out.features, seed), project(out.logits, seed + 1));
        },
        wrt, rng, 4);
  });
  return cases;
}

}  // namespace bevis::testing
