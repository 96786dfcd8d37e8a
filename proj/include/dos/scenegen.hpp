#pragma once

#include "dos/numerics.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dos {

enum class ShapeKind { Box, Cylinder, Sphere };

/// Size ranges for one object class. `size` is the footprint extent (box
/// side or diameter), `height` the vertical extent (ignored for spheres).
struct ClassShape {
  ShapeKind kind = ShapeKind::Box;
  double min_size = 0.5;
  double max_size = 1.0;
  double min_height = 0.5;
  double max_height = 1.0;
  int instances = 1;
};

struct SceneConfig {
  int num_classes = 9;
  double frequency_exponent = 1.3;
  int num_points = 2048;
  int feature_dim = 6;
  double extent = 10.0;        ///< square ground side, meters
  double feature_noise = 0.6;  ///< isotropic Gaussian std on features
  double feature_scale = 1.0;  ///< scale of class prototype vectors
  /// Distinct appearance prototypes per class; each object instance (and the
  /// ground of each scene) draws one uniformly.
  int appearance_variants = 1;
  /// Entry c describes class c+1 (class 0 is the ground plane). Empty means
  /// default_palette(num_classes).
  std::vector<ClassShape> palette;
  std::uint64_t seed = 7;

  void validate() const;
};

/// Palette used when none is configured: shapes cycle box/cylinder/sphere and
/// objects shrink with class rank.
std::vector<ClassShape> default_palette(int num_classes);

struct LabeledCloud {
  Mat positions;  ///< N x 3, meters
  Mat features;   ///< N x d
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  bool operator==(const LabeledCloud& o) const {
    return positions == o.positions && features == o.features && labels == o.labels;
  }
};

struct Dataset {
  SceneConfig config;
  std::vector<LabeledCloud> scenes;
};

/// Appearance prototypes ((C * variants) x d), row c * variants + v; a
/// deterministic function of config.seed.
Mat class_prototypes(const SceneConfig& config);

/// One procedural scene. Per-point labels are drawn i.i.d. from the power-law
/// class prior, so expected class shares equal zipf weights of the exponent.
LabeledCloud generate_scene(const SceneConfig& config, std::uint64_t seed);

/// `count` scenes; scene i uses derive_seed(config.seed, {i}).
Dataset generate_dataset(const SceneConfig& config, int count);

/// Per-class point counts over the dataset, sorted descending. Entry j pairs a
/// class index with its count.
std::vector<std::pair<int, std::size_t>> class_frequency_profile(const std::vector<LabeledCloud>& scenes,
                                                                 int num_classes);

/// Least-squares slope of log(count) against log(rank), rank starting at 1.
/// Zero counts are skipped.
double loglog_slope(const std::vector<std::size_t>& sorted_counts);

/// Head/common/tail grouping by frequency rank: three equal-as-possible groups.
/// Returns a group id (0 head, 1 common, 2 tail) per class.
std::vector<int> frequency_groups(const std::vector<std::pair<int, std::size_t>>& profile,
                                  int num_classes);

void export_scenes(const Dataset& dataset, const std::filesystem::path& dir);
Dataset import_scenes(const std::filesystem::path& dir);

}  // namespace dos
