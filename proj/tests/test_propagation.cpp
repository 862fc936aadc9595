#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "bevis/knn.hpp"
#include "bevis/propagation.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace bevis;
using bevis::testing::brute_force_knn;
using bevis::testing::random_tensor;

namespace {

std::vector<double> random_xyz(std::size_t n, Rng& rng) {
  std::vector<double> v(3 * n);
  for (auto& x : v) x = uniform(rng, 0.0, 2.0);
  return v;
}

PointCloud grid_cloud(std::size_t side, double spacing) {
  PointCloud c;
  c.gt_instance.emplace();
  c.gt_semantic.emplace();
  for (std::size_t i = 0; i < side; ++i)
    for (std::size_t j = 0; j < side; ++j) {
      const double x = spacing * static_cast<double>(i), y = spacing * static_cast<double>(j);
      const double z = 0.1 * static_cast<double>((i * 7 + j * 3) % 5);
      c.points.insert(c.points.end(), {x, y, z, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5});
      c.gt_instance->push_back(static_cast<int>(i * 2 / side));
      c.gt_semantic->push_back(static_cast<int>(i * 2 / side));
    }
  return c;
}

PropagationConfig small_prop(std::uint64_t seed = 2) {
  PropagationConfig c;
  c.embedding_dim = 3;
  c.num_classes = 4;
  c.k = 4;
  c.edge_widths = {6, 6, 6};
  c.global_width = 5;
  c.head_width = 6;
  c.seed = seed;
  return c;
}

AugmentedPointSet plain_points(const PointCloud& cloud, std::size_t d) {
  PointFeatures bev;
  bev.dim = d;
  bev.values.assign(cloud.size() * d, 0.0);
  bev.assigned.assign(cloud.size(), 0);
  for (std::size_t i = 0; i < cloud.size(); i += 2) {
    bev.assigned[i] = 1;
    for (std::size_t t = 0; t < d; ++t) bev.values[i * d + t] = 0.1 * static_cast<double>(t + i % 7);
  }
  return concat_bev_features(cloud, bev);
}

}  // namespace

TEST_CASE("knn on a line picks the nearest neighbours") {
  const std::vector<double> pts{0, 0, 0, 1, 0, 0, 3, 0, 0};
  const auto g = build_knn(pts, 3, 1);
  CHECK(g.neighbors == std::vector<std::size_t>{1, 0, 1});
  const auto all = build_knn(pts, 3, 2);
  CHECK(all.neighbors == std::vector<std::size_t>{1, 2, 0, 2, 1, 0});
  CHECK_THROWS(build_knn(pts, 3, 3));
}

TEST_CASE("knn matches brute force and never loops") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed);
    const auto pts = random_xyz(500, rng);
    const auto g = build_knn(pts, 3, 20);
    CHECK(g.neighbors == brute_force_knn(pts, 20));
    CHECK(g == reference::build_knn(pts, 3, 20));
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t j : g.row(i)) CHECK(j != i);
  }
}

TEST_CASE("knn reads xyz from wider rows") {
  Rng rng(4);
  std::vector<double> rows(60 * 5), xyz;
  for (auto& v : rows) v = uniform(rng, -1, 1);
  for (std::size_t i = 0; i < 60; ++i) xyz.insert(xyz.end(), rows.begin() + i * 5, rows.begin() + i * 5 + 3);
  CHECK(build_knn(rows, 5, 6).neighbors == brute_force_knn(xyz, 6));
}

TEST_CASE("edge conv of identical features through the difference path is zero") {
  Rng rng(1);
  const Tensor x({6, 2}, std::vector<double>(12, 0.7));
  const auto g = build_knn(random_xyz(6, rng), 3, 3);
  const Tensor zero({2, 2}, std::vector<double>(4, 0.0));
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const auto y = edge_conv(x, g, zero, eye, Tensor());
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("edge conv with one neighbour returns that edge") {
  Rng rng(2);
  const auto x = random_tensor({5, 3}, rng, -1, 1, false);
  const auto g = build_knn(random_xyz(5, rng), 3, 1);
  const auto ws = random_tensor({3, 2}, rng, -1, 1, false), wd = random_tensor({3, 2}, rng, -1, 1, false);
  const auto y = edge_conv(x, g, ws, wd, Tensor());
  for (std::size_t i = 0; i < 5; ++i) {
    const std::size_t j = g.row(i)[0];
    for (std::size_t o = 0; o < 2; ++o) {
      double expect = 0.0;
      for (std::size_t c = 0; c < 3; ++c)
        expect += x.data()[i * 3 + c] * ws.data()[c * 2 + o] +
                  (x.data()[j * 3 + c] - x.data()[i * 3 + c]) * wd.data()[c * 2 + o];
      CHECK(y.data()[i * 2 + o] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("edge conv ignores neighbour order and follows point permutations") {
  Rng rng(3);
  const std::size_t n = 12;
  const auto x = random_tensor({n, 3}, rng, -1, 1, false);
  auto g = build_knn(random_xyz(n, rng), 3, 4);
  const auto ws = random_tensor({3, 4}, rng, -1, 1, false), wd = random_tensor({3, 4}, rng, -1, 1, false);
  const auto y = edge_conv(x, g, ws, wd, Tensor());

  auto shuffled = g;
  for (std::size_t i = 0; i < n; ++i) std::reverse(shuffled.neighbors.begin() + i * 4, shuffled.neighbors.begin() + i * 4 + 4);
  const auto ys = edge_conv(x, shuffled, ws, wd, Tensor());
  CHECK(std::vector<double>(ys.data().begin(), ys.data().end()) ==
        std::vector<double>(y.data().begin(), y.data().end()));

  std::vector<std::size_t> perm(n), inv(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = (i * 5 + 3) % n;
  for (std::size_t i = 0; i < n; ++i) inv[perm[i]] = i;
  std::vector<double> px(n * 3);
  KnnGraph pg{4, std::vector<std::size_t>(n * 4)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) px[i * 3 + c] = x.data()[perm[i] * 3 + c];
    for (std::size_t m = 0; m < 4; ++m) pg.neighbors[i * 4 + m] = inv[g.row(perm[i])[m]];
  }
  const auto py = edge_conv(Tensor({n, 3}, px), pg, ws, wd, Tensor());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < 4; ++o) CHECK(py.data()[i * 4 + o] == y.data()[perm[i] * 4 + o]);
}

TEST_CASE("block sampling respects the cylinder and the replacement rule") {
  const auto cloud = grid_cloud(20, 0.1);
  const std::array<double, 2> centre{1.0, 1.0};
  const auto idx = sample_block(cloud, centre, 1.0, 64, 5);
  CHECK(idx.size() == 64);
  CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == 64);
  for (std::size_t i : idx) CHECK(std::hypot(cloud.x(i) - 1.0, cloud.y(i) - 1.0) <= 0.5);
  CHECK(sample_block(cloud, centre, 1.0, 64, 5) == idx);
  CHECK(sample_block(cloud, centre, 1.0, 64, 6) != idx);

  // A cylinder holding exactly ten points.
  PointCloud ten;
  for (int i = 0; i < 10; ++i) ten.points.insert(ten.points.end(), {0.01 * i, 0, 0, 0, 0, 0, 0, 0, 0});
  ten.points.insert(ten.points.end(), {5, 5, 0, 0, 0, 0, 0, 0, 0});
  const auto many = sample_block(ten, {0.0, 0.0}, 1.0, 1024, 1);
  CHECK(many.size() == 1024);
  for (std::size_t i : many) CHECK(i < 10);
  CHECK(std::set<std::size_t>(many.begin(), many.end()).size() == 10);
  CHECK_THROWS(sample_block(ten, {20.0, 20.0}, 1.0, 16, 1));
}

TEST_CASE("blocks drop repeated points and keep k within the block") {
  const auto cloud = grid_cloud(6, 0.1);
  const auto pts = plain_points(cloud, 3);
  const auto block = make_block(cloud, pts, {0, 1, 1, 2, 0, 3}, {0.0, 0.0}, 20);
  CHECK(block.indices == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(block.graph.k == 3);
  CHECK(block.input.shape() == Shape{4, 12});
  CHECK_THROWS(make_block(cloud, pts, {4, 4}, {0.0, 0.0}, 20));
  // Block xy is relative to the centre.
  const auto moved = make_block(cloud, pts, {7, 8, 9}, {0.1, 0.2}, 2);
  CHECK(moved.input.data()[0] == doctest::Approx(cloud.x(7) - 0.1));
  CHECK(moved.input.data()[1] == doctest::Approx(cloud.y(7) - 0.2));
}

TEST_CASE("flattened z links stacked points") {
  PointCloud c;
  for (int i = 0; i < 4; ++i) c.points.insert(c.points.end(), {0.3 * i, 0, 0, 0, 0, 0, 0, 0, 0});
  c.points.insert(c.points.end(), {0.0, 0, 0.5, 0, 0, 0, 0, 0, 0});
  const auto pts = plain_points(c, 2);
  const auto tall = make_block(c, pts, {0, 1, 2, 3, 4}, {0, 0}, 1, 1.0);
  const auto flat = make_block(c, pts, {0, 1, 2, 3, 4}, {0, 0}, 1, 0.02);
  CHECK(tall.graph.row(0)[0] == 1);
  CHECK(flat.graph.row(0)[0] == 4);
}

TEST_CASE("unseen points carry zero embeddings") {
  const auto cloud = grid_cloud(4, 0.2);
  const auto pts = plain_points(cloud, 3);
  CHECK(pts.dim == kPointFeatures + 3);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t t = 0; t < kPointFeatures; ++t) CHECK(pts.features[i * pts.dim + t] == cloud.row(i)[t]);
    if (!pts.seen[i])
      for (std::size_t t = 0; t < 3; ++t) CHECK(pts.features[i * pts.dim + kPointFeatures + t] == 0.0);
  }
}

TEST_CASE("targets average the visible features of each instance") {
  PointFeatures bev;
  bev.dim = 2;
  bev.values = {1, 1, 3, 3, 0, 0, 5, 7, 0, 0};
  bev.assigned = {1, 1, 0, 1, 0};
  const std::vector<int> inst{0, 0, 0, 1, 2};
  const auto t = compute_targets(bev, inst);
  CHECK(t.defined == std::vector<std::uint8_t>{1, 1, 1, 1, 0});
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(t.targets[i * 2] == 2.0);
    CHECK(t.targets[i * 2 + 1] == 2.0);
  }
  CHECK(t.targets[6] == 5.0);
  CHECK(t.targets[7] == 7.0);
}

TEST_CASE("the 3d instance loss is a mean distance over defined rows") {
  const Tensor pred({3, 2}, {0, 0, 1, 1, 9, 9});
  const std::vector<double> target{3, 4, 1, 1, -50, 2};
  const auto l = instance_loss_3d(pred, target, std::vector<std::uint8_t>{1, 1, 0});
  CHECK(l.value.item() == doctest::Approx(2.5));
  CHECK(l.defined_rows == 2);
  CHECK(instance_loss_3d(pred, target, std::vector<std::uint8_t>{1, 0, 0}).value.item() == 5.0);
  const std::vector<double> same(pred.data().begin(), pred.data().end());
  CHECK(instance_loss_3d(pred, same, std::vector<std::uint8_t>{1, 1, 1}).value.item() == 0.0);
  const auto none = instance_loss_3d(pred, target, std::vector<std::uint8_t>{0, 0, 0});
  CHECK(none.empty);
  CHECK(none.value.item() == 0.0);
}

TEST_CASE("the 3d net maps points to features and logits") {
  PropagationNet3D net(small_prop());
  const auto cloud = grid_cloud(5, 0.1);
  const auto pts = plain_points(cloud, 3);
  std::vector<std::size_t> all(cloud.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto block = make_block(cloud, pts, all, {0.2, 0.2}, 4);
  const auto out = net.forward(block.input, block.graph);
  CHECK(out.features.shape() == Shape{25, 3});
  CHECK(out.logits.shape() == Shape{25, 4});
  CHECK_THROWS_AS(net.forward(Tensor({25, 5}, std::vector<double>(125)), block.graph), ShapeError);
}

TEST_CASE("a scene inside one cylinder matches a single forward pass") {
  PropagationNet3D net(small_prop(4));
  const auto cloud = grid_cloud(4, 0.05);
  const auto pts = plain_points(cloud, 3);
  InferenceConfig cfg{.diameter = 2.0, .block_points = 64, .seed = 1};
  const auto pred = infer_full_scene(net, cloud, pts, cfg);
  std::vector<std::size_t> all(cloud.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  double lo_x = cloud.x(0), hi_x = lo_x, lo_y = cloud.y(0), hi_y = lo_y;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    lo_x = std::min(lo_x, cloud.x(i));
    hi_x = std::max(hi_x, cloud.x(i));
    lo_y = std::min(lo_y, cloud.y(i));
    hi_y = std::max(hi_y, cloud.y(i));
  }
  net.set_training(false);
  const auto block = make_block(cloud, pts, all, {0.5 * (lo_x + hi_x), 0.5 * (lo_y + hi_y)}, 4);
  const auto out = net.forward(block.input, block.graph);
  for (std::size_t i = 0; i < cloud.size(); ++i) CHECK(pred.coverage[i] == 1);
  CHECK(pred.features == std::vector<double>(out.features.data().begin(), out.features.data().end()));
  CHECK(pred.logits == std::vector<double>(out.logits.data().begin(), out.logits.data().end()));
}

TEST_CASE("full-scene inference covers every point and averages overlaps") {
  PropagationNet3D net(small_prop(5));
  const auto cloud = grid_cloud(30, 0.1);
  const auto pts = plain_points(cloud, 3);
  InferenceConfig cfg{.diameter = 1.0, .block_points = 40, .seed = 2};
  const auto pred = infer_full_scene(net, cloud, pts, cfg);
  std::size_t multi = 0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    CHECK(pred.coverage[i] >= 1);
    multi += pred.coverage[i] > 1;
  }
  CHECK(multi > 0);
  const auto again = infer_full_scene(net, cloud, pts, cfg);
  CHECK(again.features == pred.features);
  CHECK(again.logits == pred.logits);
}

TEST_CASE("a lone point in a cylinder still gets a prediction") {
  PropagationNet3D net(small_prop(6));
  auto cloud = grid_cloud(5, 0.05);
  cloud.points.insert(cloud.points.end(), {3.0, 3.0, 0.0, 0.5, 0.5, 0.5, 1.0, 1.0, 0.0});
  cloud.gt_instance->push_back(3);
  cloud.gt_semantic->push_back(kChair);
  const auto pts = plain_points(cloud, 3);
  const auto pred = infer_full_scene(net, cloud, pts, {.diameter = 1.0, .block_points = 64, .seed = 1});
  CHECK(pred.coverage.back() >= 1);
}

TEST_CASE("3d training lowers the block loss") {
  PropagationNet3D net(small_prop(7));
  const auto cloud = grid_cloud(8, 0.08);
  const auto pts = plain_points(cloud, 3);
  PointFeatures bev;
  bev.dim = 3;
  bev.assigned.assign(cloud.size(), 1);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (std::size_t t = 0; t < 3; ++t) bev.values.push_back((*cloud.gt_instance)[i] == 0 ? 1.0 : -1.0);
  const auto targets = compute_targets(bev, *cloud.gt_instance);
  std::vector<std::size_t> all(cloud.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::vector<TrainingBlock> batch{make_training_block(cloud, pts, targets, all, {0.3, 0.3}, 4)};
  auto params = net.registry().param_tensors();
  auto adam = make_adam(params, AdamConfig{.base_lr = 5e-3});
  const std::vector<double> w(4, 1.0);
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 100; ++step) {
    const auto r = train_step_3d(net, adam, batch, w);
    if (step == 0) first = r.total;
    last = r.total;
  }
  CHECK(last < 0.5 * first);
}
