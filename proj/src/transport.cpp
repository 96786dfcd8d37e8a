#include "dos/transport.hpp"

#include "dos/errors.hpp"

#include <algorithm>
#include <cmath>

namespace dos {

ZipfPrior zipf_prior(int K, double alpha) {
  if (K < 1) throw ConfigError("zipf_prior: K must be >= 1");
  if (!(alpha >= 0.0)) throw ConfigError("zipf_prior: alpha must be >= 0");
  ZipfPrior p{alpha, std::vector<double>(K)};
  double total = 0.0;
  for (int k = 0; k < K; ++k) {
    p.weights[k] = std::pow(static_cast<double>(k + 1), -alpha);
    total += p.weights[k];
  }
  for (auto& w : p.weights) w /= total;
  return p;
}

void TransportConfig::validate() const {
  if (iterations < 1) throw ConfigError("iterations must be >= 1", "/transport/iterations");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0", "/transport/alpha");
  if (!(alpha_final >= 0.0)) throw ConfigError("alpha_final must be >= 0", "/transport/alpha_final");
}

namespace {

void check_positive(const Mat& F) {
  if (F.size() == 0) throw NumericError("sinkhorn: empty similarity matrix");
  for (Eigen::Index i = 0; i < F.size(); ++i) {
    const double v = F.data()[i];
    if (!(v > 0.0) || !std::isfinite(v)) throw NumericError("sinkhorn: similarity entries must be positive and finite");
  }
}

void alternate(Mat& F, const std::vector<double>& w, int iterations) {
  F /= std::max(F.sum(), kTransportFloor);
  for (int t = 0; t < iterations; ++t) {
    for (Eigen::Index i = 0; i < F.rows(); ++i) F.row(i) /= std::max(F.row(i).sum(), kTransportFloor);
    const RowVec col = F.colwise().sum();
    for (Eigen::Index k = 0; k < F.cols(); ++k) F.col(k) *= w[k] / std::max(col[k], kTransportFloor);
  }
}

}  // namespace

SinkhornResult zipf_sinkhorn_full(const Mat& F, const ZipfPrior& prior, int iterations) {
  if (iterations < 1) throw ConfigError("sinkhorn: iterations must be >= 1");
  if (static_cast<std::size_t>(F.cols()) != prior.weights.size())
    throw NumericError("sinkhorn: prior length does not match prototype count");
  check_positive(F);
  SinkhornResult r;
  r.balanced = F;
  alternate(r.balanced, prior.weights, iterations);
  r.softmap = r.balanced;
  const RowVec col = r.softmap.colwise().sum();
  for (Eigen::Index k = 0; k < r.softmap.cols(); ++k) r.softmap.col(k) /= std::max(col[k], kTransportFloor);
  return r;
}

Mat balanced_assignment(const Mat& F, int iterations) {
  if (iterations < 1) throw ConfigError("sinkhorn: iterations must be >= 1");
  check_positive(F);
  Mat Q = F;
  alternate(Q, zipf_prior(static_cast<int>(F.cols()), 0.0).weights, iterations);
  for (Eigen::Index i = 0; i < Q.rows(); ++i) Q.row(i) /= std::max(Q.row(i).sum(), kTransportFloor);
  return Q;
}

SinkhornDiagnostics sinkhorn_diagnostics(const Mat& balanced, const ZipfPrior& prior) {
  SinkhornDiagnostics d;
  const RowVec col = balanced.colwise().sum();
  for (Eigen::Index k = 0; k < balanced.cols(); ++k)
    d.column_deviation = std::max(d.column_deviation, std::abs(col[k] - prior.weights[k]));
  const Vec rows = balanced.rowwise().sum();
  const double mean = rows.mean();
  if (mean > 0.0)
    for (Eigen::Index i = 0; i < rows.size(); ++i)
      d.row_spread = std::max(d.row_spread, std::abs(rows[i] - mean) / mean);
  return d;
}

}  // namespace dos
