#pragma once

#include "dos/numerics.hpp"
#include "dos/scenegen.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <vector>

namespace dos {

/// An augmented crop of a parent cloud. Rows are aligned across all arrays.
struct View {
  std::vector<int> parent;    ///< strictly increasing indices into the source cloud
  Mat positions;              ///< augmented, N x 3
  Mat features;               ///< augmented, N x d
  Mat original_positions;     ///< untouched source coordinates, N x 3

  std::size_t size() const { return parent.size(); }
};

struct AugmentConfig {
  double crop_fraction = 0.8;
  int min_points = 16;
  double rotation_max = 3.141592653589793;  ///< yaw drawn from U(-max, max)
  double scale_range = 0.1;                 ///< scale drawn from U(1 - r, 1 + r)
  double position_jitter = 0.01;            ///< Gaussian std, meters
  double feature_jitter = 0.05;             ///< Gaussian std on feature channels

  void validate() const;
};

/// Concrete augmentation draw for one view.
struct AugmentParams {
  double yaw = 0.0;
  double scale = 1.0;
  double position_jitter = 0.0;
  double feature_jitter = 0.0;
};

AugmentParams sample_augmentation(const AugmentConfig& config, Rng& rng);

/// Applies rotation about the vertical axis, uniform scale and jitter in place.
/// Jitter noise is drawn from `rng` only when the corresponding std is nonzero.
void apply_augmentation(View& view, const AugmentParams& params, Rng& rng);

/// Axis-aligned (xy) crop around a random seed point that keeps at least
/// ceil(fraction * N) points. Returns sorted parent indices.
std::vector<int> crop_indices(const Mat& positions, double fraction, Rng& rng);

View view_from_indices(const LabeledCloud& cloud, std::vector<int> parent);

std::pair<View, View> make_views(const LabeledCloud& cloud, const AugmentConfig& config, std::uint64_t seed);

struct MaskSpec {
  std::vector<int> visible;  ///< sorted view-local indices
  std::vector<bool> masked;  ///< per view-local index
  double requested_ratio = 0.0;
  double achieved_ratio = 0.0;
  double block_size = 1.0;
  std::uint64_t seed = 0;
  std::size_t blocks_masked = 0;
};

/// Whole-block masking with a first-crossing stopping rule.
MaskSpec block_mask(const View& view, double ratio, double block_size, std::uint64_t seed);

using VoxelCoord = std::array<std::int64_t, 3>;

/// Sparse voxel partition. Voxels are ordered lexicographically by coordinate,
/// so the layout does not depend on point order.
struct VoxelGrid {
  double voxel_size = 0.2;
  std::vector<VoxelCoord> coords;
  std::vector<std::vector<int>> members;  ///< point indices per voxel, increasing
  Mat pooled;                             ///< V x (d + 3): mean feature, mean offset from center
  Mat centers;                            ///< V x 3
  std::vector<int> point_voxel;           ///< voxel index of each input point

  std::size_t size() const { return coords.size(); }
  /// Index of the voxel at `c`, or -1.
  int find(const VoxelCoord& c) const;
};

VoxelCoord voxel_coord(double x, double y, double z, double voxel_size);

VoxelGrid voxelize(const Mat& positions, const Mat& features, double voxel_size);

/// Pairs (a-local visible index, b-local index) that share a parent point.
std::vector<std::pair<int, int>> correspond(const View& a, const MaskSpec& mask_a, const View& b);

/// Rows `indices` of a matrix, in order.
Mat gather_rows(const Mat& m, const std::vector<int>& indices);

}  // namespace dos
