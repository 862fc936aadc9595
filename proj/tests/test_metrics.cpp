#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "bevis/metrics.hpp"
#include "bevis/rng.hpp"
#include "support/generators.hpp"

using namespace bevis;
using bevis::testing::random_toy;
using bevis::testing::to_segments;

namespace {

Segment seg(int cls, std::vector<std::size_t> pts, double conf = 1.0) {
  return Segment{.semantic_class = cls, .confidence = conf, .points = std::move(pts)};
}

}  // namespace

TEST_CASE("perfect semantic prediction scores one") {
  const std::vector<int> gt{0, 1, 1, 2, 2, 2};
  const auto m = semantic_metrics(gt, gt, 4);
  CHECK(m.miou == 1.0);
  CHECK(m.oacc == 1.0);
  CHECK(m.macc == 1.0);
  CHECK_FALSE(m.class_iou[3].has_value());
}

TEST_CASE("binary iou counts the set overlap") {
  const std::vector<int> pred{1, 1, 1, 0}, gt{0, 1, 1, 1};
  const auto m = semantic_metrics(pred, gt, 2);
  CHECK(*m.class_iou[1] == 0.5);
  CHECK(m.oacc == 0.5);
}

TEST_CASE("an all-wrong prediction has zero accuracy") {
  const std::vector<int> pred(5, 1), gt(5, 0);
  const auto m = semantic_metrics(pred, gt, 2);
  CHECK(m.oacc == 0.0);
  CHECK(m.miou == 0.0);
}

TEST_CASE("confusion matrices accumulate across scenes") {
  ConfusionMatrix cm(3);
  cm.add(std::vector<int>{0, 1}, std::vector<int>{0, 1});
  cm.add(std::vector<int>{2, 2}, std::vector<int>{2, 1});
  const std::vector<int> pred{0, 1, 2, 2}, gt{0, 1, 2, 1};
  const auto a = cm.metrics(), b = semantic_metrics(pred, gt, 3);
  CHECK(a.miou == b.miou);
  CHECK(a.oacc == 0.75);
}

TEST_CASE("an identical instance scores one at every threshold") {
  const std::vector<Segment> gt{seg(2, {0, 1, 2})};
  const auto r = strict_ap(gt, gt, 4);
  CHECK(r.ap == 1.0);
  CHECK(r.ap25 == 1.0);
  CHECK(r.ap50 == 1.0);
  CHECK(r.ap75 == 1.0);
}

TEST_CASE("half coverage sits exactly on the 0.5 boundary") {
  const std::vector<Segment> gt{seg(1, {0, 1, 2, 3})}, pred{seg(1, {0, 1})};
  CHECK(*ap_at_overlap(pred, gt, 0.5, 2)[1] == 1.0);
  CHECK(*ap_at_overlap(pred, gt, 0.75, 2)[1] == 0.0);
  CHECK_FALSE(ap_at_overlap(pred, gt, 0.5, 2)[0].has_value());
}

TEST_CASE("a wrong class counts as a missed instance") {
  const std::vector<Segment> gt{seg(0, {0, 1}), seg(0, {2, 3}), seg(1, {4, 5})};
  auto pred = gt;
  pred[1].semantic_class = 1;
  const auto r = strict_ap(pred, gt, 2);
  const auto& at50 = r.per_class[1];
  CHECK(*at50[0] < 1.0);
  CHECK(*at50[1] < 1.0);
  CHECK(r.ap50 < 1.0);
}

TEST_CASE("no predictions give zero AP") {
  const std::vector<Segment> gt{seg(0, {0, 1})}, none;
  CHECK(strict_ap(none, gt, 1).ap == 0.0);
  CHECK(average_precision({}, 3) == 0.0);
}

TEST_CASE("area under the curve uses the all-point envelope") {
  // Hits T F T over 3 GT: recall 1/3 at p 1, 2/3 at p 2/3.
  CHECK(average_precision({true, false, true}, 3) == doctest::Approx(1.0 / 3 + (2.0 / 3) / 3));
  CHECK(average_precision({false, true}, 1) == 0.5);
}

TEST_CASE("segments carry majority classes and size confidences") {
  const std::vector<int> inst{1, 1, 0, 1, 0}, sem{3, 2, 0, 3, 0};
  const auto s = segments_from_labels(inst, sem, 4);
  REQUIRE(s.size() == 2);
  CHECK(s[0].points == std::vector<std::size_t>{2, 4});
  CHECK(s[1].semantic_class == 3);
  CHECK(s[1].confidence == doctest::Approx(0.6));
}

TEST_CASE("match matrices respect the set bounds") {
  const std::vector<Segment> pred{seg(0, {0, 1, 2}), seg(1, {3})}, gt{seg(0, {1, 2, 3, 4})};
  const auto m = match_matrix(pred, gt);
  CHECK(m.intersection[0] == 2);
  CHECK(m.union_size[0] == 5);
  CHECK(m.at(0, 0) == 0.4);
  CHECK(m.at(1, 0) == 0.25);
}

TEST_CASE("greedy matching and AP agree with an independent implementation") {
  std::size_t below_optimal = 0;
  for (std::uint64_t seed = 0; seed < 400; ++seed) {
    Rng rng(seed);
    const std::size_t n = 10 + uniform_index(rng, 51), k = 1 + uniform_index(rng, 3);
    const auto gt = random_toy(rng, n, k, false), pred = random_toy(rng, n, k, true);
    const auto gs = to_segments(gt), ps = to_segments(pred);
    const auto matches = match_matrix(ps, gs);
    for (double t : {0.25, 0.5, 0.75}) {
      const auto oracle = bevis::testing::toy_average_precision(pred, gt, n, k, t);
      const auto hits = greedy_match(ps, gs, matches, t);
      CAPTURE(seed);
      CAPTURE(t);
      CHECK(hits == oracle.hits);
      const auto ap = ap_at_overlap(ps, gs, t, k);
      for (std::size_t c = 0; c < k; ++c) {
        CHECK(ap[c].has_value() == !std::isnan(oracle.class_ap[c]));
        if (ap[c]) CHECK(*ap[c] == doctest::Approx(oracle.class_ap[c]).epsilon(1e-12));
      }
      const auto greedy = static_cast<std::size_t>(std::count(hits.begin(), hits.end(), true));
      const auto best = bevis::testing::optimal_matches(pred, gt, n, t);
      CHECK(greedy <= best);
      below_optimal += greedy < best;
    }
  }
  MESSAGE("greedy below optimal in " << below_optimal << " of 1200 cases");
}

TEST_CASE("AP never increases with the threshold") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(1000 + seed);
    const std::size_t n = 40, k = 2;
    const auto gs = to_segments(random_toy(rng, n, k, false)), ps = to_segments(random_toy(rng, n, k, true));
    const auto r = strict_ap(ps, gs, k);
    CHECK(r.ap25 >= r.ap50);
    CHECK(r.ap50 >= r.ap75);
    for (std::size_t c = 0; c < k; ++c) {
      std::optional<double> prev;
      for (std::size_t t = 0; t < r.thresholds.size(); ++t) {
        if (t > 0 && r.thresholds[t] < r.thresholds[t - 1]) prev.reset();
        const auto& v = r.per_class[t][c];
        if (v && prev) CHECK(*v <= *prev);
        if (v) prev = v;
      }
    }
  }
}

TEST_CASE("renaming instance ids changes no metric") {
  Rng rng(5);
  std::vector<int> inst(50), sem(50), gi(50), gsem(50);
  for (std::size_t i = 0; i < 50; ++i) {
    inst[i] = static_cast<int>(uniform_index(rng, 6));
    sem[i] = static_cast<int>(uniform_index(rng, 3));
    gi[i] = static_cast<int>(i / 10);
    gsem[i] = gi[i] % 3;
  }
  std::vector<int> renamed(50);
  for (std::size_t i = 0; i < 50; ++i) renamed[i] = 5 - inst[i];
  const auto gt = segments_from_labels(gi, gsem, 3);
  const auto a = strict_ap(segments_from_labels(inst, sem, 3), gt, 3);
  const auto b = strict_ap(segments_from_labels(renamed, sem, 3), gt, 3);
  CHECK(a.ap == b.ap);
  CHECK(a.ap50 == b.ap50);
  CHECK(a.per_class == b.per_class);
}

TEST_CASE("mean over present classes skips missing ones") {
  const std::vector<std::optional<double>> v{0.5, std::nullopt, 1.0};
  CHECK(mean_present(v) == 0.75);
  CHECK(mean_present(std::vector<std::optional<double>>{std::nullopt}) == 0.0);
}
