#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dos {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

using Rng = std::mt19937_64;

/// Mixes a base seed with stream identifiers so that independent purposes
/// (scene, view, mask, ...) draw from uncorrelated generators.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> stream);

/// One named parameter array and its gradient accumulator.
struct ParamArray {
  std::string name;
  Mat value;
  Mat grad;
  bool decay = true;  ///< receives decoupled weight decay
};

/// Flat, ordered storage for trainable arrays. Layout (names, shapes, order)
/// is fixed at construction; gradients always mirror values.
class ParamStore {
 public:
  Mat& add(const std::string& name, Eigen::Index rows, Eigen::Index cols, bool decay = true);

  bool contains(const std::string& name) const;
  Mat& value(const std::string& name);
  const Mat& value(const std::string& name) const;
  Mat& grad(const std::string& name);
  const Mat& grad(const std::string& name) const;

  std::span<ParamArray> arrays() { return arrays_; }
  std::span<const ParamArray> arrays() const { return arrays_; }
  std::size_t size() const { return arrays_.size(); }
  std::size_t num_values() const;

  void zero_grad();

  /// Empty string when layouts match, otherwise the name of the first
  /// mismatching array.
  std::string layout_mismatch(const ParamStore& other) const;

  bool operator==(const ParamStore& other) const;

 private:
  std::size_t index_of(const std::string& name) const;

  std::vector<ParamArray> arrays_;
  std::map<std::string, std::size_t> index_;
};

/// Loss callback for gradient checking: returns the loss and writes analytic
/// gradients into `params` (gradients are zeroed by the caller).
using LossFn = std::function<double(ParamStore& params)>;

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_analytic = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error() const;
};

/// Central finite-difference verification of every parameter value.
/// Relative error uses the denominator max(|analytic|, |numeric|, 1e-8).
GradCheckReport grad_check(const LossFn& loss_fn, ParamStore params, double eps);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.04;
};

/// Adaptive-moment optimizer with decoupled weight decay.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamStore& layout, AdamWConfig config);

  /// One bias-corrected update using the gradients stored in `params`.
  /// Throws NumericError naming the array on a non-finite gradient; in that
  /// case neither parameters nor moments are modified.
  void step(ParamStore& params);

  AdamWConfig& config() { return config_; }
  const AdamWConfig& config() const { return config_; }
  std::int64_t steps() const { return step_; }
  void set_steps(std::int64_t s) { step_ = s; }
  std::vector<Mat>& first_moments() { return m_; }
  std::vector<Mat>& second_moments() { return v_; }
  const std::vector<Mat>& first_moments() const { return m_; }
  const std::vector<Mat>& second_moments() const { return v_; }

 private:
  AdamWConfig config_;
  std::vector<Mat> m_;
  std::vector<Mat> v_;
  std::int64_t step_ = 0;
};

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

bool all_finite(const Mat& m);

}  // namespace dos
