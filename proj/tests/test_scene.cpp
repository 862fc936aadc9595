#include <doctest.h>

#include <algorithm>
#include <set>

#include "bevis/cloud_io.hpp"
#include "bevis/scene.hpp"

using namespace bevis;

namespace {

SceneSpec small_spec(std::size_t objects, std::uint64_t seed) {
  SceneSpec s;
  s.num_objects = objects;
  s.seed = seed;
  s.density = 60.0;
  return s;
}

}  // namespace

TEST_CASE("three objects give the structural instances plus three") {
  const auto spec = small_spec(3, 42);
  const auto cloud = generate_scene(spec);
  cloud.validate();
  REQUIRE(cloud.has_labels());
  const std::set<int> ids(cloud.gt_instance->begin(), cloud.gt_instance->end());
  CHECK(ids.size() == 6 + 3);
  CHECK(expected_instance_count(spec) == 9);
  std::set<int> object_ids;
  for (std::size_t i = 0; i < cloud.size(); ++i)
    if ((*cloud.gt_semantic)[i] > kCeiling) object_ids.insert((*cloud.gt_instance)[i]);
  CHECK(object_ids.size() == 3);
}

TEST_CASE("generation is deterministic in the seed") {
  CHECK(generate_scene(small_spec(4, 9)) == generate_scene(small_spec(4, 9)));
  CHECK_FALSE(generate_scene(small_spec(4, 9)) == generate_scene(small_spec(4, 10)));
}

TEST_CASE("an empty room holds only structural classes") {
  auto spec = small_spec(0, 1);
  const auto cloud = generate_scene(spec);
  for (int c : *cloud.gt_semantic) CHECK(c <= kCeiling);
  spec.ceiling = false;
  const auto open = generate_scene(spec);
  for (int c : *open.gt_semantic) CHECK(c != kCeiling);
  const std::set<int> ids(open.gt_instance->begin(), open.gt_instance->end());
  CHECK(ids.size() == expected_instance_count(spec));
}

TEST_CASE("degenerate room dimensions are rejected") {
  auto spec = small_spec(1, 1);
  spec.height = 0.0;
  CHECK_THROWS(generate_scene(spec));
  spec = small_spec(1, 1);
  spec.width = -1.0;
  CHECK_THROWS(generate_scene(spec));
}

TEST_CASE("generated labels are consistent and canonical") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto cloud = generate_scene(small_spec(seed % 6, seed));
    const auto& inst = *cloud.gt_instance;
    const auto& sem = *cloud.gt_semantic;
    std::vector<int> cls(*std::max_element(inst.begin(), inst.end()) + 1, -1);
    for (std::size_t i = 0; i < inst.size(); ++i) {
      auto& c = cls[static_cast<std::size_t>(inst[i])];
      if (c < 0) c = sem[i];
      CHECK(c == sem[i]);
    }
    // Ids 0..I-1 without gaps.
    CHECK(std::count(cls.begin(), cls.end(), -1) == 0);
    for (std::size_t i = 0; i < cloud.size(); ++i)
      for (std::size_t a = 0; a < 3; ++a) {
        CHECK(cloud.row(i)[6 + a] >= 0.0);
        CHECK(cloud.row(i)[6 + a] <= 1.0);
      }
  }
}

TEST_CASE("featurize maps the room corners and centre") {
  RoomBounds b{{-1.0, 0.0, 2.0}, {1.0, 4.0, 3.0}};
  const std::vector<double> raw{-1, 0, 2, 0.1, 0.2, 0.3,  //
                                1, 4, 3, 0.0, 0.0, 0.0,   //
                                0, 2, 2.5, 1.0, 1.0, 1.0};
  const auto cloud = featurize(raw, b);
  REQUIRE(cloud.size() == 3);
  for (std::size_t a = 0; a < 3; ++a) {
    CHECK(cloud.row(0)[6 + a] == 0.0);
    CHECK(cloud.row(1)[6 + a] == 1.0);
    CHECK(cloud.row(2)[6 + a] == 0.5);
  }
  CHECK(cloud.row(0)[3] == 0.1);

  RoomBounds flat{{0, 0, 1}, {1, 1, 1}};
  CHECK_THROWS(featurize(raw, flat));
}

TEST_CASE("featurize is idempotent on the normalized channels") {
  const auto cloud = generate_scene(small_spec(2, 5));
  std::vector<double> raw;
  for (std::size_t i = 0; i < cloud.size(); ++i)
    raw.insert(raw.end(), cloud.row(i).begin(), cloud.row(i).begin() + 6);
  const auto bounds = bounds_of(cloud.points, kPointFeatures);
  const auto once = featurize(raw, bounds);
  std::vector<double> again_raw;
  for (std::size_t i = 0; i < once.size(); ++i)
    again_raw.insert(again_raw.end(), once.row(i).begin(), once.row(i).begin() + 6);
  const auto twice = featurize(again_raw, bounds);
  CHECK(once.points == twice.points);
}

TEST_CASE("canonicalization numbers instances by first appearance") {
  const std::vector<int> ids{7, 7, 3, 9, 3, 7};
  CHECK(canonicalize_instances(ids) == std::vector<int>{0, 0, 1, 2, 1, 0});
}

TEST_CASE("cloud files round trip exactly") {
  const auto cloud = generate_scene(small_spec(3, 11));
  const auto bytes = encode_cloud(cloud);
  CHECK(std::string(bytes.begin(), bytes.begin() + 6) == "BEVPC1");
  const auto back = decode_cloud(bytes);
  CHECK(back.cloud == cloud);

  CloudExtras extras;
  extras.feature_dim = 2;
  extras.num_logits = 1;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    extras.features.push_back(static_cast<double>(i) * 0.1);
    extras.features.push_back(-1.0 / (1.0 + static_cast<double>(i)));
    extras.logits.push_back(static_cast<double>(i % 5));
  }
  const auto with_extras = decode_cloud(encode_cloud(cloud, extras));
  CHECK(with_extras.cloud == cloud);
  CHECK(with_extras.extras == extras);
}

TEST_CASE("empty clouds are valid files") {
  PointCloud empty;
  const auto back = decode_cloud(encode_cloud(empty));
  CHECK(back.cloud.size() == 0);
  CHECK(back.cloud == empty);
}

TEST_CASE("malformed cloud files report the byte offset") {
  const auto bytes = encode_cloud(generate_scene(small_spec(1, 2)));
  auto bad = bytes;
  bad[1] = 'x';
  CHECK_THROWS_WITH(decode_cloud(bad), doctest::Contains("bad magic"));
  auto truncated = bytes;
  truncated.resize(bytes.size() - 5);
  CHECK_THROWS_WITH(decode_cloud(truncated), doctest::Contains("byte offset"));
  const std::vector<unsigned char> header_only(bytes.begin(), bytes.begin() + 10);
  CHECK_THROWS_WITH(decode_cloud(header_only), doctest::Contains("byte offset"));
}

TEST_CASE("scene spec text round trips") {
  auto spec = small_spec(5, 77);
  spec.palette = {kChair, kBoard};
  spec.ceiling = false;
  const auto parsed = parse_scene_spec(format_scene_spec(spec));
  CHECK(parsed.num_objects == 5);
  CHECK(parsed.seed == 77);
  CHECK(parsed.palette == spec.palette);
  CHECK_FALSE(parsed.ceiling);
  CHECK(class_from_name(class_name(kSofa)) == kSofa);
  CHECK_THROWS(class_from_name("window"));
}
