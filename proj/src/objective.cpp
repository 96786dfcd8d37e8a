#include "dos/objective.hpp"

#include "dos/errors.hpp"
#include "dos/transport.hpp"

#include <cmath>

namespace dos {

std::string to_string(ObjectiveMode m) {
  switch (m) {
    case ObjectiveMode::SoftmapZipf: return "softmap_zipf";
    case ObjectiveMode::SoftmapUniform: return "softmap_uniform";
    case ObjectiveMode::Clustering: return "clustering";
    case ObjectiveMode::FeatureRegression: return "feature_regression";
  }
  return "?";
}

ObjectiveMode objective_mode_from_string(const std::string& s) {
  if (s == "softmap_zipf") return ObjectiveMode::SoftmapZipf;
  if (s == "softmap_uniform") return ObjectiveMode::SoftmapUniform;
  if (s == "clustering") return ObjectiveMode::Clustering;
  if (s == "feature_regression") return ObjectiveMode::FeatureRegression;
  throw ConfigError("unknown objective mode '" + s + "'", "/objective/mode");
}

Mat SimilarityMatrix::stabilized() const {
  const Mat z = logits();
  return (z.array() - z.maxCoeff()).exp().matrix();
}

namespace {

Vec row_norms(const Mat& m) { return m.rowwise().norm(); }

Mat safe_normalized_rows(const Mat& m, const Vec& norms) {
  Mat out = m;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (norms[i] > 0.0) out.row(i) /= norms[i];
    else out.row(i).setZero();
  }
  return out;
}

double entropy_term(double t, double log_t) { return t > 0.0 ? -t * log_t : 0.0; }

}  // namespace

Mat cosine_matrix(const Mat& emb, const Mat& protos) {
  const Mat e = safe_normalized_rows(emb, row_norms(emb));
  const Mat q = safe_normalized_rows(protos, row_norms(protos));
  return e * q.transpose();
}

void cosine_backward(const Mat& emb, const Mat& protos, const Mat& cosine, const Mat& d_cos, Mat& d_emb,
                     Mat& d_protos) {
  const Vec en = row_norms(emb);
  const Vec qn = row_norms(protos);
  const Mat e = safe_normalized_rows(emb, en);
  const Mat q = safe_normalized_rows(protos, qn);
  const Mat gc = d_cos.cwiseProduct(cosine);
  const Vec row_dot = gc.rowwise().sum();
  const RowVec col_dot = gc.colwise().sum();

  d_emb = d_cos * q;
  for (Eigen::Index i = 0; i < emb.rows(); ++i) {
    if (en[i] > 0.0) d_emb.row(i) = (d_emb.row(i) - row_dot[i] * e.row(i)) / en[i];
    else d_emb.row(i).setZero();
  }
  d_protos = d_cos.transpose() * e;
  for (Eigen::Index k = 0; k < protos.rows(); ++k) {
    if (qn[k] > 0.0) d_protos.row(k) = (d_protos.row(k) - col_dot[k] * q.row(k)) / qn[k];
    else d_protos.row(k).setZero();
  }
}

SimilarityMatrix similarity(const Mat& emb, const Mat& protos, double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive", "/objective/tau");
  if (emb.cols() != protos.cols()) throw Error("similarity: embedding and prototype widths differ");
  return {cosine_matrix(emb, protos), tau};
}

Softmap Softmap::from_probabilities(Mat p) {
  Softmap s;
  s.log_p = p.array().log().matrix();
  s.p = std::move(p);
  return s;
}

ClusterAssign ClusterAssign::from_probabilities(Mat p) {
  ClusterAssign s;
  s.log_p = p.array().log().matrix();
  s.p = std::move(p);
  return s;
}

Softmap softmap_normalize(const SimilarityMatrix& s) {
  if (s.rows() < 1) throw Error("softmap_normalize: no points");
  const Mat z = s.logits();
  Softmap out;
  out.log_p.resize(z.rows(), z.cols());
  for (Eigen::Index k = 0; k < z.cols(); ++k) {
    const double m = z.col(k).maxCoeff();
    const double lse = m + std::log((z.col(k).array() - m).exp().sum());
    out.log_p.col(k) = z.col(k).array() - lse;
  }
  out.p = out.log_p.array().exp().matrix();
  return out;
}

ClusterAssign cluster_normalize(const SimilarityMatrix& s) {
  if (s.cols() < 1) throw Error("cluster_normalize: no prototypes");
  const Mat z = s.logits();
  ClusterAssign out;
  out.log_p.resize(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    out.log_p.row(i) = z.row(i).array() - lse;
  }
  out.p = out.log_p.array().exp().matrix();
  return out;
}

bool is_column_stochastic(const Mat& m, double tol) {
  if ((m.array() < 0.0).any()) return false;
  const RowVec c = m.colwise().sum();
  return ((c.array() - 1.0).abs() <= tol).all();
}

bool is_row_stochastic(const Mat& m, double tol) {
  if ((m.array() < 0.0).any()) return false;
  const Vec r = m.rowwise().sum();
  return ((r.array() - 1.0).abs() <= tol).all();
}

SoftmapLoss softmap_loss(const Softmap& target, const Softmap& pred) {
  if (target.p.rows() != pred.p.rows() || target.p.cols() != pred.p.cols())
    throw Error("softmap_loss: shape mismatch");
  const auto K = static_cast<double>(pred.p.cols());
  SoftmapLoss out;
  out.kl_per_prototype.resize(pred.p.cols());
  double total = 0.0, kl_total = 0.0;
  for (Eigen::Index k = 0; k < pred.p.cols(); ++k) {
    double ce = 0.0, h = 0.0;
    for (Eigen::Index i = 0; i < pred.p.rows(); ++i) {
      const double t = target.p(i, k);
      if (t > 0.0) {
        ce -= t * pred.log_p(i, k);
        h += entropy_term(t, target.log_p(i, k));
      }
    }
    out.kl_per_prototype[k] = ce - h;
    total += ce;
    kl_total += ce - h;
  }
  out.value = total / K;
  out.kl = kl_total / K;
  const RowVec tsum = target.p.colwise().sum();
  out.d_logits = (pred.p.array().rowwise() * tsum.array()).matrix() - target.p;
  out.d_logits /= K;
  return out;
}

ClusteringLoss clustering_loss(const ClusterAssign& target, const ClusterAssign& pred) {
  if (target.p.rows() != pred.p.rows() || target.p.cols() != pred.p.cols())
    throw Error("clustering_loss: shape mismatch");
  const auto N = static_cast<double>(pred.p.rows());
  ClusteringLoss out;
  double total = 0.0;
  for (Eigen::Index i = 0; i < pred.p.rows(); ++i)
    for (Eigen::Index k = 0; k < pred.p.cols(); ++k)
      if (target.p(i, k) > 0.0) total -= target.p(i, k) * pred.log_p(i, k);
  out.value = total / N;
  const Vec tsum = target.p.rowwise().sum();
  out.d_logits = (pred.p.array().colwise() * tsum.array()).matrix() - target.p;
  out.d_logits /= N;
  return out;
}

RegressionLoss feature_regression_loss(const Mat& student, const Mat& teacher) {
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols())
    throw Error("feature_regression_loss: shape mismatch");
  RegressionLoss out;
  out.d_student = Mat::Zero(student.rows(), student.cols());
  const auto n = static_cast<double>(student.rows());
  if (student.rows() == 0) return out;
  double total = 0.0;
  for (Eigen::Index i = 0; i < student.rows(); ++i) {
    const double sn = student.row(i).norm(), tn = teacher.row(i).norm();
    if (sn == 0.0 || tn == 0.0) {
      ++out.zero_norm_rows;
      total += 1.0;
      continue;
    }
    const double c = student.row(i).dot(teacher.row(i)) / (sn * tn);
    total += 1.0 - c;
    // d(1 - cos)/ds = -(t_hat - c s_hat) / |s|
    out.d_student.row(i) = -(teacher.row(i) / tn - c * student.row(i) / sn) / sn / n;
  }
  out.value = total / n;
  return out;
}

namespace {

struct BlockLoss {
  double value = 0.0;
  double kl = 0.0;
};

BlockLoss block_loss(ObjectiveMode mode, const Mat& student_emb, const Mat& protos, const SupervisionBlock& block,
                     double tau_student, double weight, ViewLossResult& acc) {
  if (block.rows.empty()) throw Error("view_pair_loss: empty supervision set");
  Mat emb(static_cast<Eigen::Index>(block.rows.size()), student_emb.cols());
  for (std::size_t r = 0; r < block.rows.size(); ++r) emb.row(static_cast<Eigen::Index>(r)) = student_emb.row(block.rows[r]);

  BlockLoss out;
  Mat d_rows;
  if (mode == ObjectiveMode::FeatureRegression) {
    const RegressionLoss l = feature_regression_loss(emb, block.target);
    out.value = l.value;
    acc.zero_norm_rows += l.zero_norm_rows;
    d_rows = weight * l.d_student;
  } else {
    const SimilarityMatrix s = similarity(emb, protos, tau_student);
    Mat d_logits;
    if (mode == ObjectiveMode::Clustering) {
      const ClusteringLoss l = clustering_loss(ClusterAssign::from_probabilities(block.target), cluster_normalize(s));
      out.value = l.value;
      d_logits = l.d_logits;
    } else {
      const SoftmapLoss l = softmap_loss(Softmap::from_probabilities(block.target), softmap_normalize(s));
      out.value = l.value;
      out.kl = l.kl;
      d_logits = l.d_logits;
    }
    Mat d_emb, d_protos;
    cosine_backward(emb, protos, s.cosine, (weight / tau_student) * d_logits, d_emb, d_protos);
    acc.d_protos += d_protos;
    d_rows = std::move(d_emb);
  }
  for (std::size_t r = 0; r < block.rows.size(); ++r) acc.d_emb.row(block.rows[r]) += d_rows.row(static_cast<Eigen::Index>(r));
  return out;
}

}  // namespace

ViewLossResult view_pair_loss(ObjectiveMode mode, const Mat& student_emb, const Mat& protos,
                              const ViewTargets& targets, double tau_student, bool cross_enabled) {
  ViewLossResult r;
  r.d_emb = Mat::Zero(student_emb.rows(), student_emb.cols());
  r.d_protos = Mat::Zero(protos.rows(), protos.cols());
  r.cross_used = cross_enabled && targets.has_cross && !targets.cross.rows.empty();
  const double w = r.cross_used ? 0.5 : 1.0;
  const BlockLoss same = block_loss(mode, student_emb, protos, targets.same, tau_student, w, r);
  r.same = same.value;
  r.kl = same.kl;
  if (r.cross_used) {
    const BlockLoss cross = block_loss(mode, student_emb, protos, targets.cross, tau_student, w, r);
    r.cross = cross.value;
    r.value = 0.5 * (same.value + cross.value);
    r.kl = 0.5 * (same.kl + cross.kl);
  } else {
    r.value = same.value;
  }
  return r;
}

Mat teacher_softmap_target(const Mat& teacher_emb, const Mat& protos, double tau_teacher, double alpha,
                           int iterations) {
  const SimilarityMatrix s = similarity(teacher_emb, protos, tau_teacher);
  return zipf_sinkhorn(s.stabilized(), zipf_prior(static_cast<int>(protos.rows()), alpha), iterations);
}

int renormalize_prototypes(Mat& protos, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  int redrawn = 0;
  for (Eigen::Index k = 0; k < protos.rows(); ++k) {
    double n = protos.row(k).norm();
    while (!(n > 0.0) || !std::isfinite(n)) {
      for (Eigen::Index j = 0; j < protos.cols(); ++j) protos(k, j) = n01(rng);
      n = protos.row(k).norm();
      ++redrawn;
    }
    protos.row(k) /= n;
  }
  return redrawn;
}

}  // namespace dos
