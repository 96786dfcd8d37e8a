#pragma once

#include "dos/encoder.hpp"
#include "dos/numerics.hpp"
#include "dos/scenegen.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dos {

struct ProbeConfig {
  double train_fraction = 0.8;  ///< scene-level split of the labeled set
  int iterations = 300;
  double l2 = 1e-4;
  int max_points = 40000;       ///< training points subsampled beyond this
  std::uint64_t seed = 11;
  std::string params = "teacher";  ///< which encoder copy to probe

  void validate() const;
};

/// Frozen per-point features: the full, unaugmented scene is voxelized and
/// encoded; every point takes its voxel's embedding.
Mat extract_features(const ParamStore& params, const EncoderConfig& encoder, const LabeledCloud& scene,
                     double voxel_size);

struct LinearProbe {
  Mat weights;              ///< C x D
  Vec bias;                 ///< C
  RowVec mean, scale;       ///< feature standardization
  std::vector<bool> active; ///< classes seen during fitting
  std::vector<double> loss_history;
  std::vector<std::string> warnings;

  std::vector<int> predict(const Mat& features) const;
};

/// Multinomial logistic regression by full-batch gradient descent on
/// standardized features, step size 1/L from the curvature bound.
LinearProbe fit_linear_probe(const Mat& features, const std::vector<int>& labels, int num_classes,
                             const ProbeConfig& config);

struct ProbeResult {
  std::vector<double> iou;      ///< per class; NaN when the class has no ground truth
  std::vector<bool> present;
  double miou = 0.0;
  double macc = 0.0;
  double acc = 0.0;
  double head = 0.0, common = 0.0, tail = 0.0;
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> confusion;  ///< rows: truth, cols: prediction
};

/// Metrics from predictions against ground truth. Groups come from
/// frequency_groups(); an empty vector derives them from `truth`.
ProbeResult evaluate_predictions(const std::vector<int>& truth, const std::vector<int>& pred, int num_classes,
                                 std::vector<int> groups = {});

ProbeResult evaluate(const LinearProbe& probe, const std::vector<Mat>& features,
                     const std::vector<const LabeledCloud*>& scenes, int num_classes, std::vector<int> groups = {});

/// Split, feature extraction, fit and evaluation in one call.
ProbeResult run_probe(const ParamStore& params, const EncoderConfig& encoder, double voxel_size,
                      const std::vector<LabeledCloud>& train_scenes, const std::vector<LabeledCloud>& eval_scenes,
                      int num_classes, const ProbeConfig& config);

}  // namespace dos
