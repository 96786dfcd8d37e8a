#pragma once

#include "dos/numerics.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dos {

enum class ObjectiveMode { SoftmapZipf, SoftmapUniform, Clustering, FeatureRegression };

std::string to_string(ObjectiveMode m);
ObjectiveMode objective_mode_from_string(const std::string& s);

/// Exponentiated cosine similarities s_ik = exp(cos(e_i, q_k) / tau).
/// The cosine matrix is kept; exponentials are formed with the global maximum
/// subtracted so normalizations never overflow.
struct SimilarityMatrix {
  Mat cosine;
  double tau = 1.0;

  Eigen::Index rows() const { return cosine.rows(); }
  Eigen::Index cols() const { return cosine.cols(); }
  Mat logits() const { return cosine / tau; }
  /// Unshifted s_ik.
  double value(Eigen::Index i, Eigen::Index k) const { return std::exp(cosine(i, k) / tau); }
  /// s scaled by exp(-max logit): entries in (0, 1].
  Mat stabilized() const;
  SimilarityMatrix transpose() const { return {cosine.transpose(), tau}; }
};

/// Row-wise cosine between embeddings (N x D) and prototypes (K x D). Zero
/// rows on either side give cosine 0.
Mat cosine_matrix(const Mat& emb, const Mat& protos);

/// Gradients of sum_ik G_ik * cos_ik with respect to embeddings and prototypes.
void cosine_backward(const Mat& emb, const Mat& protos, const Mat& cosine, const Mat& d_cos, Mat& d_emb,
                     Mat& d_protos);

SimilarityMatrix similarity(const Mat& emb, const Mat& protos, double tau);

/// Column-stochastic: each prototype's distribution over points.
struct Softmap {
  Mat p;
  Mat log_p;
  static Softmap from_probabilities(Mat p);
};

/// Row-stochastic: each point's distribution over prototypes.
struct ClusterAssign {
  Mat p;
  Mat log_p;
  static ClusterAssign from_probabilities(Mat p);
};

Softmap softmap_normalize(const SimilarityMatrix& s);
ClusterAssign cluster_normalize(const SimilarityMatrix& s);

bool is_column_stochastic(const Mat& m, double tol);
bool is_row_stochastic(const Mat& m, double tol);

struct SoftmapLoss {
  double value = 0.0;                 ///< -(1/K) sum_k sum_i T_ik log P_ik
  double kl = 0.0;                    ///< value minus mean target-column entropy
  std::vector<double> kl_per_prototype;
  Mat d_logits;                       ///< d value / d (pred logits), column-softmax chain rule
};

SoftmapLoss softmap_loss(const Softmap& target, const Softmap& pred);

struct ClusteringLoss {
  double value = 0.0;  ///< mean over rows of cross-entropy
  Mat d_logits;
};

ClusteringLoss clustering_loss(const ClusterAssign& target, const ClusterAssign& pred);

struct RegressionLoss {
  double value = 0.0;  ///< mean of 1 - cos over pairs
  Mat d_student;
  int zero_norm_rows = 0;
};

/// Rows of `student` and `teacher` are already paired.
RegressionLoss feature_regression_loss(const Mat& student, const Mat& teacher);

/// Teacher-side supervision for one student view: a same-view block over the
/// supervised student rows and an optional cross-view block.
struct SupervisionBlock {
  std::vector<int> rows;  ///< student embedding rows
  Mat target;             ///< Softmap, ClusterAssign or teacher embeddings, per mode
};

struct ViewTargets {
  SupervisionBlock same;
  SupervisionBlock cross;
  bool has_cross = false;
};

struct ViewLossResult {
  double value = 0.0;  ///< L_a
  double same = 0.0;
  double cross = 0.0;
  bool cross_used = false;
  double kl = 0.0;     ///< mean of block KL diagnostics (softmap modes)
  Mat d_emb;           ///< gradient w.r.t. the student embedding matrix
  Mat d_protos;        ///< gradient w.r.t. prototypes
  int zero_norm_rows = 0;
};

/// L_a = (same + cross) / 2, or the same-view term alone when the cross block
/// is absent or disabled.
ViewLossResult view_pair_loss(ObjectiveMode mode, const Mat& student_emb, const Mat& protos,
                              const ViewTargets& targets, double tau_student, bool cross_enabled);

/// Teacher target for one block: Zipf-Sinkhorn (softmap modes; alpha forced to
/// zero for SoftmapUniform by the caller) or raw rows (feature regression).
Mat teacher_softmap_target(const Mat& teacher_emb, const Mat& protos, double tau_teacher, double alpha,
                           int iterations);

/// Scales every prototype row to unit norm. Zero rows are redrawn from `rng`.
/// Returns the number of redrawn rows.
int renormalize_prototypes(Mat& protos, Rng& rng);

}  // namespace dos
