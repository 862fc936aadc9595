#include <doctest.h>

#include <cmath>

#include "bevis/losses.hpp"
#include "bevis/ops.hpp"
#include "bevis/unet.hpp"
#include "support/gradcheck.hpp"

using namespace bevis;
using bevis::testing::random_tensor;

namespace {

UNetConfig tiny_unet(std::uint64_t seed = 1) {
  UNetConfig c;
  c.embedding_dim = 3;
  c.num_classes = 4;
  c.widths = {4, 4, 8, 8};
  c.seed = seed;
  return c;
}

Tensor rows(std::vector<std::vector<double>> r) {
  std::vector<double> v;
  for (const auto& x : r) v.insert(v.end(), x.begin(), x.end());
  return Tensor({r.size(), r.front().size()}, v);
}

BirdsEyeView toy_view(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  BirdsEyeView v;
  v.height = h;
  v.width = w;
  v.cell_size = 0.05;
  v.channels.resize(h * w * kBevChannels);
  v.valid.resize(h * w);
  v.index_map.resize(h * w);
  v.gt_instance.resize(h * w);
  v.gt_semantic.resize(h * w);
  for (std::size_t c = 0; c < h * w; ++c) {
    const bool valid = uniform01(rng) < 0.8;
    v.valid[c] = valid;
    v.index_map[c] = valid ? static_cast<std::int64_t>(c) : kNoPoint;
    const int inst = static_cast<int>((c % w) * 3 / w);
    v.gt_instance[c] = valid ? inst : kIgnoreLabel;
    v.gt_semantic[c] = valid ? inst % 4 : kIgnoreLabel;
    for (std::size_t t = 0; t < kBevChannels; ++t)
      v.channels[c * kBevChannels + t] = valid ? uniform(rng, 0.0, 1.0) + 0.3 * inst : 0.0;
  }
  return v;
}

}  // namespace

TEST_CASE("pair similarity is the euclidean distance") {
  const std::vector<double> a{0.0, 0.0}, b{3.0, 4.0};
  CHECK(pair_similarity(a, a) == 0.0);
  CHECK(pair_similarity(a, b) == 5.0);
  CHECK(pair_similarity(b, a) == pair_similarity(a, b));
}

TEST_CASE("pull hinge is inactive inside the margin and linear outside") {
  const PairLossConfig cfg;
  const std::vector<int> one{0, 0};
  CHECK(instance_loss_2d(rows({{0, 0}, {0.3, 0}}), one, cfg, 1).total.item() == 0.0);
  const auto far = instance_loss_2d(rows({{0, 0}, {0.9, 0}}), one, cfg, 1);
  CHECK(far.total.item() == doctest::Approx(0.4).epsilon(1e-14));
  CHECK(far.var_pairs == 1);
}

TEST_CASE("push hinge follows the distance margin") {
  const PairLossConfig cfg;
  const std::vector<int> two{0, 1};
  CHECK(instance_loss_2d(rows({{0, 0}, {2.0, 0}}), two, cfg, 1).total.item() == 0.0);
  CHECK(instance_loss_2d(rows({{0, 0}, {1.0, 0}}), two, cfg, 1).total.item() == doctest::Approx(0.5));
}

TEST_CASE("separated collapsed instances give exactly zero loss") {
  const PairLossConfig cfg;
  std::vector<std::vector<double>> e;
  std::vector<int> ids;
  for (int inst = 0; inst < 4; ++inst)
    for (int k = 0; k < 30; ++k) {
      e.push_back({1.5 * inst, -1.5 * inst, 0.0});
      ids.push_back(inst);
    }
  const auto loss = instance_loss_2d(rows(e), ids, cfg, 3);
  CHECK(loss.total.item() == 0.0);
  CHECK(loss.var == 0.0);
  CHECK(loss.dist == 0.0);
}

TEST_CASE("zero loss exactly when all sampled pairs respect both margins") {
  const PairLossConfig cfg{.delta_var = 0.5, .delta_dist = 1.5, .samples_per_instance = 1000};
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    std::vector<std::vector<double>> e;
    std::vector<int> ids;
    const double spread = uniform(rng, 0.0, 0.4), gap = uniform(rng, 1.0, 3.0);
    for (int inst = 0; inst < 3; ++inst)
      for (int k = 0; k < 6; ++k) {
        e.push_back({gap * inst + uniform(rng, -spread, spread) * 0.5, uniform(rng, -spread, spread) * 0.5});
        ids.push_back(inst);
      }
    bool margins = true;
    for (std::size_t i = 0; i < e.size(); ++i)
      for (std::size_t j = i + 1; j < e.size(); ++j) {
        const double d = std::hypot(e[i][0] - e[j][0], e[i][1] - e[j][1]);
        if (ids[i] == ids[j] ? d > cfg.delta_var : d < cfg.delta_dist) margins = false;
      }
    CAPTURE(seed);
    CHECK((instance_loss_2d(rows(e), ids, cfg, seed).total.item() == 0.0) == margins);
  }
}

TEST_CASE("pair loss is invariant to id relabelling and embedding shifts") {
  Rng rng(4);
  const auto e = random_tensor({40, 3}, rng, -1, 1, false);
  std::vector<int> ids(40), relabelled(40);
  for (std::size_t i = 0; i < 40; ++i) {
    ids[i] = static_cast<int>(i % 5 == 0 ? kIgnoreLabel : i % 3);
    relabelled[i] = ids[i] == kIgnoreLabel ? kIgnoreLabel : 10 + (2 - ids[i]) * 7;
  }
  const PairLossConfig cfg{.samples_per_instance = 4};
  const double base = instance_loss_2d(e, ids, cfg, 8).total.item();
  CHECK(instance_loss_2d(e, relabelled, cfg, 8).total.item() == base);
  std::vector<double> shifted(e.data().begin(), e.data().end());
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += 0.75 * static_cast<double>(i % 3 + 1);
  CHECK(instance_loss_2d(Tensor({40, 3}, shifted), ids, cfg, 8).total.item() == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("sampling is fixed by the seed") {
  Rng rng(6);
  const auto e = random_tensor({300, 2}, rng, -2, 2, false);
  std::vector<int> ids(300);
  for (std::size_t i = 0; i < 300; ++i) ids[i] = static_cast<int>(i % 2);
  const PairLossConfig cfg{.samples_per_instance = 10};
  const auto a = instance_loss_2d(e, ids, cfg, 5).total.item();
  CHECK(instance_loss_2d(e, ids, cfg, 5).total.item() == a);
  CHECK(instance_loss_2d(e, ids, cfg, 6).total.item() != a);
  CHECK(instance_loss_2d(e, ids, cfg, 5).var_pairs == 2 * 45);
}

TEST_CASE("no visible instance means zero loss with a flag") {
  const auto l = instance_loss_2d(rows({{1, 2}, {3, 4}}), std::vector<int>{kIgnoreLabel, kIgnoreLabel},
                                  PairLossConfig{}, 1);
  CHECK(l.no_instances);
  CHECK(l.total.item() == 0.0);
}

TEST_CASE("pair loss configuration is validated") {
  CHECK_THROWS(PairLossConfig{.delta_var = 1.0, .delta_dist = 0.5}.validate());
  CHECK_THROWS(PairLossConfig{.samples_per_instance = 1}.validate());
  CHECK_NOTHROW(PairLossConfig{}.validate());
}

TEST_CASE("the u-net keeps the input resolution and is fully convolutional") {
  InstanceNet2D net(tiny_unet());
  auto out = net.forward(Tensor({16, 32, kBevChannels}, std::vector<double>(16 * 32 * kBevChannels, 0.1)));
  CHECK(out.embedding.shape() == Shape{16, 32, 3});
  CHECK(out.logits.shape() == Shape{16, 32, 4});
  out = net.forward(Tensor({16, 64, kBevChannels}, std::vector<double>(16 * 64 * kBevChannels, 0.1)));
  CHECK(out.embedding.shape() == Shape{16, 64, 3});
  CHECK_THROWS_AS(net.forward(Tensor({16, 20, kBevChannels}, std::vector<double>(16 * 20 * kBevChannels))),
                  ShapeError);
}

TEST_CASE("all-invalid views produce outputs but no loss") {
  InstanceNet2D net(tiny_unet());
  auto v = toy_view(16, 16, 2);
  for (std::size_t c = 0; c < v.cells(); ++c) {
    v.valid[c] = 0;
    v.index_map[c] = kNoPoint;
    v.gt_instance[c] = v.gt_semantic[c] = kIgnoreLabel;
    for (std::size_t t = 0; t < kBevChannels; ++t) v.channels[c * kBevChannels + t] = 0.0;
  }
  const std::vector<double> w(4, 1.0);
  const auto loss = view_loss_2d(net, v, PairLossConfig{}, w, 3);
  CHECK(loss.total.item() == 0.0);
}

TEST_CASE("invalid cell inputs never reach the loss") {
  const auto v = toy_view(16, 16, 7);
  auto perturbed = v;
  for (std::size_t c = 0; c < v.cells(); ++c)
    if (!v.valid[c]) perturbed.channels[c * kBevChannels] = 42.0;
  InstanceNet2D a(tiny_unet(3)), b(tiny_unet(3));
  const std::vector<double> w(4, 1.0);
  CHECK(view_loss_2d(a, v, PairLossConfig{}, w, 9).total.item() ==
        view_loss_2d(b, perturbed, PairLossConfig{}, w, 9).total.item());
}

TEST_CASE("training on a fixed view lowers the loss") {
  InstanceNet2D net(tiny_unet(5));
  auto params = net.registry().param_tensors();
  auto adam = make_adam(params, AdamConfig{.base_lr = 3e-3});
  const std::vector<BirdsEyeView> batch{toy_view(16, 32, 11)};
  const std::vector<double> w(4, 1.0);
  const PairLossConfig cfg{.samples_per_instance = 30};
  double first = 0.0, last = 0.0;
  for (std::size_t step = 0; step < 200; ++step) {
    const auto r = train_step_2d(net, adam, batch, cfg, w, 17);
    REQUIRE_FALSE(r.aborted);
    if (step == 0) first = r.total;
    last = r.total;
  }
  CHECK(last < 0.5 * first);
}
