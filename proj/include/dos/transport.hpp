#pragma once

#include "dos/numerics.hpp"

#include <vector>

namespace dos {

/// Power-law prototype marginal: w_k = k^-alpha / sum_j j^-alpha, k = 1..K.
struct ZipfPrior {
  double alpha = 0.0;
  std::vector<double> weights;
};

ZipfPrior zipf_prior(int K, double alpha);

struct TransportConfig {
  int iterations = 3;
  double alpha = 1.3;
  /// When set, alpha ramps linearly from `alpha` to `alpha_final` over training.
  bool alpha_schedule = false;
  double alpha_final = 1.3;
  double tolerance = 1e-6;  ///< row-spread level reported as converged

  void validate() const;
};

/// Floor applied to every intermediate row/column/global sum.
inline constexpr double kTransportFloor = 1e-30;

struct SinkhornDiagnostics {
  double column_deviation = 0.0;  ///< max_k |sum_i F_ik - w_k|
  double row_spread = 0.0;        ///< max_i |r_i - mean(r)| / mean(r)
};

/// Result of the alternating normalization before the final column
/// renormalization, kept for diagnostics.
struct SinkhornResult {
  Mat balanced;  ///< F after T rounds; column sums equal w
  Mat softmap;   ///< column-stochastic regularized teacher softmap
};

/// Global normalization, T rounds of {rows to 1, columns to w}, then a final
/// column normalization. F must be strictly positive with K == prior size.
SinkhornResult zipf_sinkhorn_full(const Mat& F, const ZipfPrior& prior, int iterations);

inline Mat zipf_sinkhorn(const Mat& F, const ZipfPrior& prior, int iterations) {
  return zipf_sinkhorn_full(F, prior, iterations).softmap;
}

/// SwAV-style balanced assignment: the same alternating loop with a uniform
/// column marginal, finished with a row normalization (row-stochastic).
Mat balanced_assignment(const Mat& F, int iterations);

SinkhornDiagnostics sinkhorn_diagnostics(const Mat& balanced, const ZipfPrior& prior);

}  // namespace dos
