#include "dos/cloudops.hpp"
#include "dos/errors.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

using namespace dos;

namespace {

LabeledCloud scene(int n = 1500, std::uint64_t seed = 3) {
  SceneConfig c;
  c.num_points = n;
  return generate_scene(c, seed);
}

AugmentConfig no_aug() {
  AugmentConfig a;
  a.crop_fraction = 1.0;
  a.rotation_max = 0.0;
  a.scale_range = 0.0;
  a.position_jitter = 0.0;
  a.feature_jitter = 0.0;
  return a;
}

View grid_view(const std::vector<std::array<double, 3>>& pts) {
  View v;
  const auto n = static_cast<Eigen::Index>(pts.size());
  v.positions.resize(n, 3);
  v.features = Mat::Zero(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    v.positions.row(i) << pts[i][0], pts[i][1], pts[i][2];
    v.parent.push_back(static_cast<int>(i));
  }
  v.original_positions = v.positions;
  return v;
}

}  // namespace

TEST_CASE("no crop and no augmentation reproduce the source") {
  const auto c = scene();
  const auto [a, b] = make_views(c, no_aug(), 9);
  for (const View* v : {&a, &b}) {
    REQUIRE(v->size() == c.size());
    for (std::size_t i = 0; i < v->size(); ++i) CHECK(v->parent[i] == static_cast<int>(i));
    CHECK(v->positions == c.positions);
    CHECK(v->features == c.features);
  }
}

TEST_CASE("full-turn rotation is the identity") {
  const auto c = scene(400);
  View v = view_from_indices(c, [&] {
    std::vector<int> all(c.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    return all;
  }());
  AugmentParams p;
  p.yaw = 2.0 * std::numbers::pi;
  Rng rng(1);
  apply_augmentation(v, p, rng);
  CHECK((v.positions - v.original_positions).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("crops overlap and keep their fraction") {
  const auto c = scene(2048);
  AugmentConfig cfg;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto [a, b] = make_views(c, cfg, s);
    CHECK(a.size() >= static_cast<std::size_t>(std::ceil(0.8 * 2048)));
    CHECK(std::is_sorted(a.parent.begin(), a.parent.end()));
    CHECK(std::adjacent_find(a.parent.begin(), a.parent.end()) == a.parent.end());
    std::vector<int> common;
    std::set_intersection(a.parent.begin(), a.parent.end(), b.parent.begin(), b.parent.end(),
                          std::back_inserter(common));
    CHECK(common.size() >= static_cast<std::size_t>(0.6 * 2048));
    CHECK(a.original_positions == gather_rows(c.positions, a.parent));
  }
}

TEST_CASE("crop below the minimum point count fails") {
  auto cfg = no_aug();
  cfg.crop_fraction = 0.01;
  cfg.min_points = 50;
  CHECK_THROWS_AS(make_views(scene(500), cfg, 1), GeometryError);
}

TEST_CASE("block mask ratio 0 keeps everything") {
  const auto c = scene(300);
  const auto [a, b] = make_views(c, no_aug(), 2);
  const auto m = block_mask(a, 0.0, 1.0, 5);
  CHECK(m.visible.size() == a.size());
  CHECK(m.achieved_ratio == 0.0);
}

TEST_CASE("a single occupied block cannot be masked") {
  const View v = grid_view({{0.1, 0.1, 0.1}, {0.2, 0.3, 0.4}, {0.9, 0.9, 0.9}});
  try {
    block_mask(v, 0.7, 1.0, 1);
    FAIL("expected GeometryError");
  } catch (const GeometryError& e) {
    CHECK(std::string(e.what()).find("mask ratio leaves no visible points") != std::string::npos);
  }
}

TEST_CASE("ten equal blocks at ratio 0.7 mask exactly seven") {
  std::vector<std::array<double, 3>> pts;
  for (int b = 0; b < 10; ++b)
    for (int k = 0; k < 4; ++k) pts.push_back({b + 0.1 + 0.2 * k, 0.5, 0.5});
  const View v = grid_view(pts);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto m = block_mask(v, 0.7, 1.0, s);
    CHECK(m.blocks_masked == 7);
    CHECK(m.achieved_ratio == doctest::Approx(0.7));
    CHECK(m.visible.size() == 12);
    // Whole blocks only.
    for (int b = 0; b < 10; ++b)
      for (int k = 1; k < 4; ++k) CHECK(m.masked[4 * b + k] == m.masked[4 * b]);
  }
}

TEST_CASE("achieved ratio is near the request on scenes") {
  const auto c = scene(2048);
  const auto [a, b] = make_views(c, AugmentConfig{}, 4);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto m = block_mask(a, 0.7, 1.0, s);
    CHECK(m.achieved_ratio >= 0.7);
    CHECK(m.achieved_ratio <= 0.75);
    CHECK(!m.visible.empty());
  }
}

TEST_CASE("voxelize examples") {
  Mat p(3, 3), f(3, 2);
  p << 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9;
  f << 1, 2, 3, 4, 5, 9;
  const auto g = voxelize(p, f, 1.0);
  REQUIRE(g.size() == 1);
  CHECK(g.pooled(0, 0) == doctest::Approx(3.0));
  CHECK(g.pooled(0, 1) == doctest::Approx(5.0));
  CHECK(g.pooled(0, 2) == doctest::Approx(-0.1));
  CHECK(g.centers(0, 0) == doctest::Approx(0.5));

  Mat q(2, 3);
  q << -0.01, 0, 0, 0.01, 0, 0;
  const auto g2 = voxelize(q, Mat::Zero(2, 1), 1.0);
  CHECK(g2.size() == 2);
  CHECK(g2.coords[0][0] == -1);
  CHECK(g2.coords[1][0] == 0);
}

TEST_CASE("voxelization is a partition") {
  const auto c = scene(1500);
  const auto g = voxelize(c.positions, c.features, 0.2);
  std::vector<int> seen(c.size(), 0);
  std::size_t total = 0;
  for (std::size_t v = 0; v < g.size(); ++v) {
    total += g.members[v].size();
    for (int i : g.members[v]) {
      ++seen[i];
      CHECK(g.point_voxel[i] == static_cast<int>(v));
    }
  }
  CHECK(total == c.size());
  CHECK(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
  CHECK(g.pooled.allFinite());
  CHECK(std::is_sorted(g.coords.begin(), g.coords.end()));
}

TEST_CASE("correspondence examples") {
  const auto c = scene(600);
  const auto [a, b] = make_views(c, no_aug(), 1);
  const auto full = block_mask(a, 0.0, 1.0, 1);
  const auto pairs = correspond(a, full, b);
  REQUIRE(pairs.size() == a.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) CHECK(pairs[i] == std::make_pair(int(i), int(i)));

  View lo = view_from_indices(c, {0, 1, 2, 3});
  View hi = view_from_indices(c, {4, 5, 6});
  CHECK(correspond(lo, block_mask(lo, 0.0, 1.0, 1), hi).empty());
}

TEST_CASE("correspondence equals a brute-force count") {
  const auto c = scene(2048);
  const auto [a, b] = make_views(c, AugmentConfig{}, 6);
  const auto m = block_mask(a, 0.7, 1.0, 3);
  const auto pairs = correspond(a, m, b);
  std::size_t brute = 0;
  for (int i : m.visible)
    for (std::size_t j = 0; j < b.size(); ++j)
      if (a.parent[i] == b.parent[j]) ++brute;
  CHECK(pairs.size() == brute);
  std::vector<int> a_side;
  for (const auto& [i, j] : pairs) {
    CHECK(!m.masked[i]);
    CHECK(a.parent[i] == b.parent[j]);
    a_side.push_back(i);
  }
  std::sort(a_side.begin(), a_side.end());
  CHECK(std::adjacent_find(a_side.begin(), a_side.end()) == a_side.end());
}

TEST_CASE("augment config validation") {
  AugmentConfig a;
  a.crop_fraction = 0.0;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  a = {};
  a.scale_range = 1.0;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  CHECK_THROWS_AS(block_mask(View{}, 1.0, 1.0, 1), ConfigError);
}
