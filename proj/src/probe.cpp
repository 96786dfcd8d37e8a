#include "dos/probe.hpp"

#include "dos/cloudops.hpp"
#include "dos/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dos {

void ProbeConfig::validate() const {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("train_fraction must be in (0, 1)", "/probe/train_fraction");
  if (iterations < 0) throw ConfigError("iterations must be >= 0", "/probe/iterations");
  if (!(l2 >= 0.0)) throw ConfigError("l2 must be >= 0", "/probe/l2");
  if (max_points < 1) throw ConfigError("max_points must be >= 1", "/probe/max_points");
  if (params != "teacher" && params != "student")
    throw ConfigError("params must be 'teacher' or 'student'", "/probe/params");
}

Mat extract_features(const ParamStore& params, const EncoderConfig& encoder, const LabeledCloud& scene,
                     double voxel_size) {
  const VoxelGrid grid = voxelize(scene.positions, scene.features, voxel_size);
  const Mat z = encode(params, grid, encoder);
  return gather_rows(z, grid.point_voxel);
}

namespace {

// Row-wise softmax over the active classes; inactive columns get probability 0.
Mat class_probabilities(const Mat& logits, const std::vector<bool>& active) {
  Mat p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < logits.cols(); ++c)
      if (active[c]) mx = std::max(mx, logits(i, c));
    double s = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      p(i, c) = active[c] ? std::exp(logits(i, c) - mx) : 0.0;
      s += p(i, c);
    }
    p.row(i) /= s;
  }
  return p;
}

double largest_eigenvalue(const Mat& g) {
  Vec v = Vec::Ones(g.rows()) / std::sqrt(static_cast<double>(g.rows()));
  double lambda = 0.0;
  for (int it = 0; it < 100; ++it) {
    Vec w = g * v;
    const double n = w.norm();
    if (n == 0.0) return 0.0;
    v = w / n;
    lambda = n;
  }
  return lambda;
}

}  // namespace

std::vector<int> LinearProbe::predict(const Mat& features) const {
  Mat x = features;
  x.rowwise() -= mean;
  x.array().rowwise() /= scale.array();
  Mat logits = x * weights.transpose();
  logits.rowwise() += bias.transpose();
  std::vector<int> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    int best = -1;
    for (Eigen::Index c = 0; c < logits.cols(); ++c)
      if (active[c] && (best < 0 || logits(i, c) > logits(i, best))) best = static_cast<int>(c);
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

LinearProbe fit_linear_probe(const Mat& features, const std::vector<int>& labels, int num_classes,
                             const ProbeConfig& config) {
  config.validate();
  if (features.rows() != static_cast<Eigen::Index>(labels.size()))
    throw Error("fit_linear_probe: feature/label count mismatch");
  if (features.rows() == 0) throw Error("fit_linear_probe: no training points");

  std::vector<int> rows(labels.size());
  std::iota(rows.begin(), rows.end(), 0);
  if (static_cast<int>(rows.size()) > config.max_points) {
    Rng rng(derive_seed(config.seed, {0x70726f6265ULL}));
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(static_cast<std::size_t>(config.max_points));
    std::sort(rows.begin(), rows.end());
  }
  Mat x = gather_rows(features, rows);
  const auto n = x.rows();
  const auto D = x.cols();

  LinearProbe probe;
  probe.mean = x.colwise().mean();
  x.rowwise() -= probe.mean;
  probe.scale = (x.array().square().colwise().sum() / static_cast<double>(n)).sqrt();
  for (Eigen::Index j = 0; j < D; ++j)
    if (!(probe.scale(j) > 1e-12)) probe.scale(j) = 1.0;
  x.array().rowwise() /= probe.scale.array();

  Mat y = Mat::Zero(n, num_classes);
  probe.active.assign(static_cast<std::size_t>(num_classes), false);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int c = labels[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])];
    if (c < 0 || c >= num_classes) throw Error("fit_linear_probe: label out of range");
    y(i, c) = 1.0;
    probe.active[static_cast<std::size_t>(c)] = true;
  }
  for (int c = 0; c < num_classes; ++c)
    if (!probe.active[static_cast<std::size_t>(c)])
      probe.warnings.push_back("class " + std::to_string(c) + " absent from probe training; excluded");

  // Softmax cross-entropy Hessian is bounded by 0.5 * (X^T X / n) (+1 for the bias column).
  Mat xa(n, D + 1);
  xa.leftCols(D) = x;
  xa.col(D).setOnes();
  const double L = 0.5 * largest_eigenvalue(xa.transpose() * xa / static_cast<double>(n)) + config.l2;
  const double lr = L > 0.0 ? 1.0 / L : 1.0;

  Mat w = Mat::Zero(num_classes, D + 1);  // last column is the bias
  for (int it = 0; it <= config.iterations; ++it) {
    const Mat p = class_probabilities(xa * w.transpose(), probe.active);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (int c = 0; c < num_classes; ++c)
        if (y(i, c) > 0.0) loss -= std::log(std::max(p(i, c), 1e-300));
    loss /= static_cast<double>(n);
    loss += 0.5 * config.l2 * w.leftCols(D).squaredNorm();
    probe.loss_history.push_back(loss);
    if (it == config.iterations) break;
    Mat g = (p - y).transpose() * xa / static_cast<double>(n);
    g.leftCols(D) += config.l2 * w.leftCols(D);
    w -= lr * g;
  }
  probe.weights = w.leftCols(D);
  probe.bias = w.col(D);
  return probe;
}

ProbeResult evaluate_predictions(const std::vector<int>& truth, const std::vector<int>& pred, int num_classes,
                                 std::vector<int> groups) {
  if (truth.size() != pred.size()) throw Error("evaluate: truth/prediction size mismatch");
  ProbeResult r;
  r.confusion = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(num_classes, num_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= num_classes || pred[i] < 0 || pred[i] >= num_classes)
      throw Error("evaluate: label out of range");
    ++r.confusion(truth[i], pred[i]);
  }
  if (groups.empty()) {
    std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
    for (int t : truth) ++counts[static_cast<std::size_t>(t)];
    std::vector<std::pair<int, std::size_t>> profile;
    for (int c = 0; c < num_classes; ++c) profile.emplace_back(c, counts[static_cast<std::size_t>(c)]);
    std::stable_sort(profile.begin(), profile.end(), [](auto& a, auto& b) { return a.second > b.second; });
    groups = frequency_groups(profile, num_classes);
  }

  r.iou.assign(static_cast<std::size_t>(num_classes), std::numeric_limits<double>::quiet_NaN());
  r.present.assign(static_cast<std::size_t>(num_classes), false);
  double iou_sum = 0.0, acc_sum = 0.0;
  int present = 0;
  std::int64_t correct = 0, total = 0;
  double gsum[3] = {0, 0, 0};
  int gcount[3] = {0, 0, 0};
  for (int c = 0; c < num_classes; ++c) {
    const std::int64_t tp = r.confusion(c, c);
    const std::int64_t support = r.confusion.row(c).sum();
    const std::int64_t predicted = r.confusion.col(c).sum();
    correct += tp;
    total += support;
    if (support == 0) continue;
    const double iou = static_cast<double>(tp) / static_cast<double>(support + predicted - tp);
    r.iou[static_cast<std::size_t>(c)] = iou;
    r.present[static_cast<std::size_t>(c)] = true;
    iou_sum += iou;
    acc_sum += static_cast<double>(tp) / static_cast<double>(support);
    ++present;
    const int g = groups[static_cast<std::size_t>(c)];
    gsum[g] += iou;
    ++gcount[g];
  }
  r.miou = present ? iou_sum / present : 0.0;
  r.macc = present ? acc_sum / present : 0.0;
  r.acc = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  r.head = gcount[0] ? gsum[0] / gcount[0] : 0.0;
  r.common = gcount[1] ? gsum[1] / gcount[1] : 0.0;
  r.tail = gcount[2] ? gsum[2] / gcount[2] : 0.0;
  return r;
}

ProbeResult evaluate(const LinearProbe& probe, const std::vector<Mat>& features,
                     const std::vector<const LabeledCloud*>& scenes, int num_classes, std::vector<int> groups) {
  if (probe.weights.rows() != num_classes) throw Error("evaluate: probe class count does not match dataset");
  std::vector<int> truth, pred;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto p = probe.predict(features[s]);
    pred.insert(pred.end(), p.begin(), p.end());
    truth.insert(truth.end(), scenes[s]->labels.begin(), scenes[s]->labels.end());
  }
  return evaluate_predictions(truth, pred, num_classes, std::move(groups));
}

ProbeResult run_probe(const ParamStore& params, const EncoderConfig& encoder, double voxel_size,
                      const std::vector<LabeledCloud>& train_scenes, const std::vector<LabeledCloud>& eval_scenes,
                      int num_classes, const ProbeConfig& config) {
  std::vector<int> labels;
  std::vector<Mat> train_feats;
  Eigen::Index rows = 0;
  for (const auto& s : train_scenes) {
    train_feats.push_back(extract_features(params, encoder, s, voxel_size));
    rows += train_feats.back().rows();
    labels.insert(labels.end(), s.labels.begin(), s.labels.end());
  }
  if (train_feats.empty()) throw Error("run_probe: no training scenes");
  Mat x(rows, train_feats.front().cols());
  Eigen::Index r0 = 0;
  for (const auto& f : train_feats) {
    x.middleRows(r0, f.rows()) = f;
    r0 += f.rows();
  }
  const LinearProbe probe = fit_linear_probe(x, labels, num_classes, config);

  // Frequency thirds come from the labeled training split.
  const auto groups = frequency_groups(class_frequency_profile(train_scenes, num_classes), num_classes);

  std::vector<Mat> eval_feats;
  std::vector<const LabeledCloud*> ptrs;
  for (const auto& s : eval_scenes) {
    eval_feats.push_back(extract_features(params, encoder, s, voxel_size));
    ptrs.push_back(&s);
  }
  return evaluate(probe, eval_feats, ptrs, num_classes, groups);
}

}  // namespace dos
