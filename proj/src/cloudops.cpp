#include "dos/cloudops.hpp"

#include "dos/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dos {

void AugmentConfig::validate() const {
  if (!(crop_fraction > 0.0 && crop_fraction <= 1.0))
    throw ConfigError("crop_fraction must be in (0, 1]", "/views/crop_fraction");
  if (min_points < 1) throw ConfigError("min_points must be >= 1", "/views/min_points");
  if (!(rotation_max >= 0.0)) throw ConfigError("rotation_max must be >= 0", "/views/rotation_max");
  if (!(scale_range >= 0.0 && scale_range < 1.0)) throw ConfigError("scale_range must be in [0, 1)", "/views/scale_range");
  if (!(position_jitter >= 0.0)) throw ConfigError("position_jitter must be >= 0", "/views/position_jitter");
  if (!(feature_jitter >= 0.0)) throw ConfigError("feature_jitter must be >= 0", "/views/feature_jitter");
}

AugmentParams sample_augmentation(const AugmentConfig& config, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  AugmentParams p;
  p.yaw = config.rotation_max * u(rng);
  p.scale = 1.0 + config.scale_range * u(rng);
  p.position_jitter = config.position_jitter;
  p.feature_jitter = config.feature_jitter;
  return p;
}

void apply_augmentation(View& view, const AugmentParams& params, Rng& rng) {
  const double c = std::cos(params.yaw), s = std::sin(params.yaw);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (Eigen::Index i = 0; i < view.positions.rows(); ++i) {
    const double x = view.positions(i, 0), y = view.positions(i, 1);
    view.positions(i, 0) = params.scale * (c * x - s * y);
    view.positions(i, 1) = params.scale * (s * x + c * y);
    view.positions(i, 2) = params.scale * view.positions(i, 2);
  }
  if (params.position_jitter > 0.0)
    for (Eigen::Index i = 0; i < view.positions.size(); ++i)
      view.positions.data()[i] += params.position_jitter * n01(rng);
  if (params.feature_jitter > 0.0)
    for (Eigen::Index i = 0; i < view.features.size(); ++i)
      view.features.data()[i] += params.feature_jitter * n01(rng);
}

std::vector<int> crop_indices(const Mat& positions, double fraction, Rng& rng) {
  const auto n = static_cast<int>(positions.rows());
  std::vector<int> all(n);
  std::iota(all.begin(), all.end(), 0);
  if (fraction >= 1.0 || n == 0) return all;
  const int keep = std::max(1, static_cast<int>(std::ceil(fraction * n)));
  std::uniform_int_distribution<int> pick(0, n - 1);
  const int seed_point = pick(rng);
  const double cx = positions(seed_point, 0), cy = positions(seed_point, 1);
  std::vector<double> dist(n);
  for (int i = 0; i < n; ++i)
    dist[i] = std::max(std::abs(positions(i, 0) - cx), std::abs(positions(i, 1) - cy));
  std::vector<double> sorted = dist;
  std::nth_element(sorted.begin(), sorted.begin() + (keep - 1), sorted.end());
  const double half = sorted[keep - 1];
  std::vector<int> out;
  for (int i = 0; i < n; ++i)
    if (dist[i] <= half) out.push_back(i);
  return out;
}

View view_from_indices(const LabeledCloud& cloud, std::vector<int> parent) {
  View v;
  v.parent = std::move(parent);
  v.positions = gather_rows(cloud.positions, v.parent);
  v.features = gather_rows(cloud.features, v.parent);
  v.original_positions = v.positions;
  return v;
}

std::pair<View, View> make_views(const LabeledCloud& cloud, const AugmentConfig& config, std::uint64_t seed) {
  if (cloud.size() == 0) throw GeometryError("make_views: empty cloud");
  config.validate();
  auto one = [&](std::uint64_t which) {
    Rng crop_rng(derive_seed(seed, {which, 0}));
    auto idx = crop_indices(cloud.positions, config.crop_fraction, crop_rng);
    if (static_cast<int>(idx.size()) < config.min_points)
      throw GeometryError("make_views: crop kept " + std::to_string(idx.size()) + " points, fewer than min_points=" +
                          std::to_string(config.min_points));
    View v = view_from_indices(cloud, std::move(idx));
    Rng aug_rng(derive_seed(seed, {which, 1}));
    const AugmentParams params = sample_augmentation(config, aug_rng);
    apply_augmentation(v, params, aug_rng);
    return v;
  };
  View a = one(1);
  View b = one(2);
  return {std::move(a), std::move(b)};
}

MaskSpec block_mask(const View& view, double ratio, double block_size, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("mask ratio must be in [0, 1)", "/mask/ratio");
  if (!(block_size > 0.0)) throw ConfigError("block size must be positive", "/mask/block_size");
  const auto n = static_cast<int>(view.size());
  MaskSpec spec;
  spec.requested_ratio = ratio;
  spec.block_size = block_size;
  spec.seed = seed;
  spec.masked.assign(n, false);

  if (ratio > 0.0 && n > 0) {
    std::map<VoxelCoord, std::vector<int>> blocks;
    for (int i = 0; i < n; ++i)
      blocks[voxel_coord(view.positions(i, 0), view.positions(i, 1), view.positions(i, 2), block_size)].push_back(i);
    std::vector<const std::vector<int>*> order;
    for (const auto& [coord, pts] : blocks) order.push_back(&pts);
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    int masked = 0;
    for (const auto* pts : order) {
      if (static_cast<double>(masked) / n >= ratio) break;
      for (int i : *pts) spec.masked[i] = true;
      masked += static_cast<int>(pts->size());
      ++spec.blocks_masked;
    }
    if (masked >= n) throw GeometryError("mask ratio leaves no visible points");
  }
  int masked = 0;
  for (int i = 0; i < n; ++i) {
    if (spec.masked[i]) ++masked;
    else spec.visible.push_back(i);
  }
  if (spec.visible.empty()) throw GeometryError("mask ratio leaves no visible points");
  spec.achieved_ratio = n ? static_cast<double>(masked) / n : 0.0;
  return spec;
}

VoxelCoord voxel_coord(double x, double y, double z, double voxel_size) {
  return {static_cast<std::int64_t>(std::floor(x / voxel_size)), static_cast<std::int64_t>(std::floor(y / voxel_size)),
          static_cast<std::int64_t>(std::floor(z / voxel_size))};
}

int VoxelGrid::find(const VoxelCoord& c) const {
  auto it = std::lower_bound(coords.begin(), coords.end(), c);
  if (it == coords.end() || *it != c) return -1;
  return static_cast<int>(it - coords.begin());
}

VoxelGrid voxelize(const Mat& positions, const Mat& features, double voxel_size) {
  if (!(voxel_size > 0.0)) throw ConfigError("voxel size must be positive", "/train/voxel_size");
  const auto n = static_cast<int>(positions.rows());
  const auto d = features.cols();
  std::vector<std::pair<VoxelCoord, int>> keyed(n);
  for (int i = 0; i < n; ++i)
    keyed[i] = {voxel_coord(positions(i, 0), positions(i, 1), positions(i, 2), voxel_size), i};
  std::sort(keyed.begin(), keyed.end());

  VoxelGrid g;
  g.voxel_size = voxel_size;
  g.point_voxel.assign(n, -1);
  for (const auto& [c, i] : keyed) {
    if (g.coords.empty() || g.coords.back() != c) {
      g.coords.push_back(c);
      g.members.emplace_back();
    }
    g.members.back().push_back(i);
    g.point_voxel[i] = static_cast<int>(g.coords.size()) - 1;
  }
  const auto V = static_cast<Eigen::Index>(g.coords.size());
  g.pooled = Mat::Zero(V, d + 3);
  g.centers.resize(V, 3);
  for (Eigen::Index v = 0; v < V; ++v) {
    for (int a = 0; a < 3; ++a) g.centers(v, a) = (static_cast<double>(g.coords[v][a]) + 0.5) * voxel_size;
    const auto& mem = g.members[v];
    for (int i : mem) {
      g.pooled.row(v).head(d) += features.row(i);
      g.pooled.row(v).tail(3) += positions.row(i) - g.centers.row(v);
    }
    g.pooled.row(v) /= static_cast<double>(mem.size());
  }
  return g;
}

std::vector<std::pair<int, int>> correspond(const View& a, const MaskSpec& mask_a, const View& b) {
  std::vector<std::pair<int, int>> out;
  std::size_t j = 0;
  for (int i : mask_a.visible) {
    const int p = a.parent[i];
    while (j < b.parent.size() && b.parent[j] < p) ++j;
    if (j < b.parent.size() && b.parent[j] == p) out.emplace_back(i, static_cast<int>(j));
  }
  return out;
}

Mat gather_rows(const Mat& m, const std::vector<int>& indices) {
  Mat out(static_cast<Eigen::Index>(indices.size()), m.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(indices[r]);
  return out;
}

}  // namespace dos
