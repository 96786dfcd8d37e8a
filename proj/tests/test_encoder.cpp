#include "dos/encoder.hpp"
#include "dos/errors.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>

using namespace dos;

namespace {

EncoderConfig small() {
  EncoderConfig c;
  c.input_width = 5;
  c.hidden = 6;
  c.embed = 4;
  return c;
}

VoxelGrid cloud_grid(int n, std::uint64_t seed, double shift = 0.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  std::normal_distribution<double> g(0.0, 1.0);
  Mat p(n, 3), f(n, 2);
  for (int i = 0; i < n; ++i) {
    p.row(i) << u(rng) + shift, u(rng), 0.5 * u(rng);
    f.row(i) << g(rng), g(rng);
  }
  return voxelize(p, f, 0.25);
}

}  // namespace

TEST_CASE("init is deterministic with zero biases and fan-in variance") {
  EncoderConfig c;
  c.hidden = 128;
  const ParamStore a = init_params(c, 4), b = init_params(c, 4);
  CHECK(a == b);
  CHECK(!(a == init_params(c, 5)));
  double sum = 0, sq = 0;
  long n = 0;
  for (const auto& arr : a.arrays()) {
    if (arr.name.back() == 'b') {
      CHECK(arr.value.isZero());
      CHECK(!arr.decay);
      continue;
    }
    const double fan_in = static_cast<double>(arr.value.rows());
    for (Eigen::Index i = 0; i < arr.value.size(); ++i) {
      const double x = arr.value.data()[i] * std::sqrt(fan_in);
      sum += x;
      sq += x * x;
      ++n;
    }
  }
  CHECK(n >= 10000);
  const double var = sq / n - (sum / n) * (sum / n);
  CHECK(std::abs(var - 1.0) < 0.2);
}

TEST_CASE("single voxel with zero weights yields the bias pathway") {
  const auto c = small();
  ParamStore p = init_params(c, 1);
  for (auto& a : p.arrays()) a.value.setZero();
  p.value("out.b") << 0.5, -1.0, 2.0, 0.0;
  Mat pts(1, 3), f(1, 2);
  pts << 0.1, 0.1, 0.1;
  f << 3, 4;
  const Mat z = encode(p, voxelize(pts, f, 1.0), c);
  REQUIRE(z.rows() == 1);
  CHECK(z.allFinite());
  CHECK(z.row(0) == p.value("out.b").row(0));
}

TEST_CASE("distant voxels do not interact") {
  const auto c = small();
  const ParamStore p = init_params(c, 2);
  Mat pts(2, 3), f(2, 2);
  pts << 0.1, 0.1, 0.1, 20.1, 0.1, 0.1;
  f << 1, 2, 3, 4;
  const Mat z0 = encode(p, voxelize(pts, f, 0.5), c);
  f(1, 0) = -7.0;
  const Mat z1 = encode(p, voxelize(pts, f, 0.5), c);
  CHECK(z0.row(0) == z1.row(0));
  CHECK(z0.row(1) != z1.row(1));
}

TEST_CASE("point order does not change embeddings") {
  const auto c = small();
  const ParamStore p = init_params(c, 3);
  Rng rng(1);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  Mat pts(200, 3), f(200, 2);
  for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = u(rng);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = u(rng);
  std::vector<int> perm(200);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto g0 = voxelize(pts, f, 0.3);
  const auto g1 = voxelize(gather_rows(pts, perm), gather_rows(f, perm), 0.3);
  REQUIRE(g0.coords == g1.coords);
  CHECK((encode(p, g0, c) - encode(p, g1, c)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("whole-voxel translation leaves embeddings unchanged") {
  const auto c = small();
  const ParamStore p = init_params(c, 6);
  const auto g0 = cloud_grid(300, 7);
  const auto g1 = cloud_grid(300, 7, 0.25 * 13);
  REQUIRE(g0.size() == g1.size());
  for (std::size_t v = 0; v < g0.size(); ++v) CHECK(g1.coords[v][0] == g0.coords[v][0] + 13);
  CHECK((g0.pooled - g1.pooled).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((encode(p, g0, c) - encode(p, g1, c)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("encoder gradients agree with finite differences") {
  auto c = small();
  c.layers = 2;
  const auto grid = cloud_grid(120, 9);
  const auto graph = build_graph(grid.coords, c);
  ParamStore p = init_params(c, 10);
  const Mat probe = [&] {
    Rng rng(3);
    std::normal_distribution<double> g(0.0, 1.0);
    Mat m(static_cast<Eigen::Index>(grid.size()), c.embed);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    return m;
  }();
  auto loss = [&](ParamStore& s) {
    EncoderCache cache;
    const Mat z = encode(s, graph, grid.pooled, c, &cache);
    const Mat dz = probe + 2.0 * z;  // loss = <probe, z> + |z|^2
    encode_backward(s, graph, cache, dz, c);
    return (probe.array() * z.array()).sum() + z.squaredNorm();
  };
  CHECK(grad_check(loss, p, 1e-6).max_rel_error() < 1e-5);

  // Input gradient.
  EncoderCache cache;
  const Mat z = encode(p, graph, grid.pooled, c, &cache);
  p.zero_grad();
  const Mat dx = encode_backward(p, graph, cache, probe, c);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < std::min<Eigen::Index>(grid.pooled.size(), 60); ++i) {
    Mat xp = grid.pooled, xm = grid.pooled;
    xp.data()[i] += 1e-6;
    xm.data()[i] -= 1e-6;
    const double fd = ((probe.array() * encode(p, graph, xp, c).array()).sum() -
                       (probe.array() * encode(p, graph, xm, c).array()).sum()) / 2e-6;
    worst = std::max(worst, std::abs(fd - dx.data()[i]) / std::max({std::abs(fd), std::abs(dx.data()[i]), 1e-8}));
  }
  CHECK(worst < 1e-5);
  (void)z;
}

TEST_CASE("ema update") {
  ParamStore t, s;
  t.add("w", 1, 1)(0, 0) = 2.0;
  s.add("w", 1, 1)(0, 0) = 1.0;
  ParamStore a = t;
  ema_update(a, s, 0.9);
  CHECK(a.value("w")(0, 0) == doctest::Approx(1.9).epsilon(1e-15));
  ParamStore b = t;
  ema_update(b, s, 1.0);
  CHECK(b == t);
  ParamStore d = t;
  ema_update(d, s, 0.0);
  CHECK(d.value("w") == s.value("w"));

  ParamStore other;
  other.add("w", 1, 1);
  other.add("extra", 2, 2);
  ParamStore wrong;
  wrong.add("v", 1, 1);
  try {
    ema_update(t, wrong, 0.5);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("w") != std::string::npos);
  }
  CHECK_THROWS_AS(ema_update(t, other, 0.5), Error);
  CHECK_THROWS_AS(ema_update(t, s, 1.5), Error);
}

TEST_CASE("encoder config validation") {
  EncoderConfig c;
  c.hidden = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.layers = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.pool_factor = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
