#include "dos/numerics.hpp"

#include "dos/errors.hpp"

#include <algorithm>
#include <cmath>

namespace dos {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> stream) {
  std::uint64_t h = splitmix64(base);
  for (auto s : stream) h = splitmix64(h ^ splitmix64(s + 0x632BE59BD9B4E019ULL));
  return h;
}

bool all_finite(const Mat& m) { return m.allFinite(); }

Mat& ParamStore::add(const std::string& name, Eigen::Index rows, Eigen::Index cols, bool decay) {
  if (index_.count(name)) throw Error("duplicate parameter array '" + name + "'");
  index_[name] = arrays_.size();
  arrays_.push_back({name, Mat::Zero(rows, cols), Mat::Zero(rows, cols), decay});
  return arrays_.back().value;
}

bool ParamStore::contains(const std::string& name) const { return index_.count(name) > 0; }

std::size_t ParamStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter array '" + name + "'");
  return it->second;
}

Mat& ParamStore::value(const std::string& name) { return arrays_[index_of(name)].value; }
const Mat& ParamStore::value(const std::string& name) const { return arrays_[index_of(name)].value; }
Mat& ParamStore::grad(const std::string& name) { return arrays_[index_of(name)].grad; }
const Mat& ParamStore::grad(const std::string& name) const { return arrays_[index_of(name)].grad; }

std::size_t ParamStore::num_values() const {
  std::size_t n = 0;
  for (const auto& a : arrays_) n += static_cast<std::size_t>(a.value.size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& a : arrays_) a.grad.setZero(a.value.rows(), a.value.cols());
}

std::string ParamStore::layout_mismatch(const ParamStore& other) const {
  const std::size_t n = std::max(arrays_.size(), other.arrays_.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (i >= arrays_.size()) return other.arrays_[i].name;
    if (i >= other.arrays_.size()) return arrays_[i].name;
    const auto& a = arrays_[i];
    const auto& b = other.arrays_[i];
    if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols())
      return a.name;
  }
  return {};
}

bool ParamStore::operator==(const ParamStore& other) const {
  if (!layout_mismatch(other).empty()) return false;
  for (std::size_t i = 0; i < arrays_.size(); ++i)
    if (arrays_[i].value != other.arrays_[i].value) return false;
  return true;
}

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

GradCheckReport grad_check(const LossFn& loss_fn, ParamStore params, double eps) {
  if (!(eps > 0.0)) throw NumericError("grad_check: eps must be positive");
  params.zero_grad();
  const double base = loss_fn(params);
  if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss at base point");

  std::vector<Mat> analytic;
  for (const auto& a : params.arrays()) analytic.push_back(a.grad);

  GradCheckReport report;
  auto arrays = params.arrays();
  for (std::size_t ai = 0; ai < arrays.size(); ++ai) {
    GradCheckEntry entry{arrays[ai].name, 0.0, 0.0};
    for (Eigen::Index j = 0; j < arrays[ai].value.size(); ++j) {
      double& p = arrays[ai].value.data()[j];
      const double saved = p;
      p = saved + eps;
      params.zero_grad();
      const double plus = loss_fn(params);
      p = saved - eps;
      params.zero_grad();
      const double minus = loss_fn(params);
      p = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus))
        throw NumericError("grad_check: non-finite loss while perturbing '" + arrays[ai].name + "'");
      const double numeric = (plus - minus) / (2.0 * eps);
      const double an = analytic[ai].data()[j];
      const double denom = std::max({std::abs(an), std::abs(numeric), 1e-8});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(an - numeric) / denom);
      entry.max_abs_analytic = std::max(entry.max_abs_analytic, std::abs(an));
    }
    report.entries.push_back(entry);
  }
  return report;
}

AdamW::AdamW(const ParamStore& layout, AdamWConfig config) : config_(config) {
  for (const auto& a : layout.arrays()) {
    m_.push_back(Mat::Zero(a.value.rows(), a.value.cols()));
    v_.push_back(Mat::Zero(a.value.rows(), a.value.cols()));
  }
}

void AdamW::step(ParamStore& params) {
  auto arrays = params.arrays();
  if (arrays.size() != m_.size()) throw Error("AdamW: parameter layout changed");
  for (const auto& a : arrays)
    if (!a.grad.allFinite()) throw NumericError("AdamW: non-finite gradient in '" + a.name + "'");

  ++step_;
  const double t = static_cast<double>(step_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    auto& a = arrays[i];
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * a.grad;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * a.grad.cwiseProduct(a.grad);
    if (a.decay && config_.weight_decay != 0.0) a.value *= 1.0 - config_.lr * config_.weight_decay;
    a.value.array() -= config_.lr * (m_[i].array() / bc1) /
                       ((v_[i].array() / bc2).sqrt() + config_.eps);
  }
}

}  // namespace dos
