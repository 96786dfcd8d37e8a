#include "dos/config.hpp"
#include "dos/errors.hpp"
#include "dos/trainer.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

using namespace dos;
namespace fs = std::filesystem;

namespace {

SceneConfig tiny_scene(int n = 256) {
  SceneConfig s;
  s.num_points = n;
  return s;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.encoder.input_width = 9;
  t.encoder.hidden = 8;
  t.encoder.embed = 8;
  t.prototypes = 8;
  t.batch_size = 2;
  t.epochs = 3;
  t.voxel_size = 0.3;
  return t;
}

std::vector<const LabeledCloud*> ptrs(const std::vector<LabeledCloud>& v) {
  std::vector<const LabeledCloud*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

bool bitwise_equal(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

// Replaces every masked point of the student's copy with fresh noise.
StudentViewHook scramble(std::uint64_t seed) {
  return [seed](View& v, const MaskSpec& m, int scene, int view) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(scene), static_cast<std::uint64_t>(view)}));
    std::normal_distribution<double> g(0.0, 3.0);
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!m.masked[i]) continue;
      for (int a = 0; a < 3; ++a) v.positions(static_cast<Eigen::Index>(i), a) += g(rng);
      for (Eigen::Index j = 0; j < v.features.cols(); ++j) v.features(static_cast<Eigen::Index>(i), j) = g(rng);
    }
  };
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dos_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("schedule endpoints and midpoint") {
  TrainConfig c;
  CHECK(schedule(0, 100, c).momentum == doctest::Approx(0.996).epsilon(1e-15));
  CHECK(schedule(100, 100, c).momentum == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(schedule(50, 100, c).momentum - 0.998) < 1e-15);
  CHECK(schedule(30, 100, c).alpha == 1.3);
  c.transport.alpha_schedule = true;
  c.transport.alpha = 0.0;
  c.transport.alpha_final = 2.0;
  CHECK(schedule(25, 100, c).alpha == doctest::Approx(0.5));
}

TEST_CASE("zero epochs returns the initial state") {
  const auto data = generate_dataset(tiny_scene(), 2).scenes;
  auto cfg = tiny_train();
  cfg.epochs = 0;
  TrainState s;
  const auto log = pretrain(cfg, data, s);
  CHECK(log.empty());
  CHECK(s.step == 0);
  CHECK(s.student == init_state(cfg, 6).student);
  CHECK_THROWS_AS(pretrain(cfg, {}, s), Error);
}

TEST_CASE("learning rate zero leaves parameters unchanged") {
  const auto data = generate_dataset(tiny_scene(), 2).scenes;
  auto cfg = tiny_train();
  cfg.optimizer.lr = 0.0;
  TrainState s = init_state(cfg, 6);
  const ParamStore before = s.student;
  train_step(s, ptrs(data), 10);
  // Prototype renormalization and the EMA blend round at the last bit.
  for (std::size_t i = 0; i < before.size(); ++i) {
    const Mat& b = before.arrays()[i].value;
    CHECK((s.student.arrays()[i].value - b).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((s.teacher.arrays()[i].value - b).cwiseAbs().maxCoeff() < 1e-15);
  }
  CHECK(s.step == 1);
}

TEST_CASE("student and teacher agree at init without masking or augmentation") {
  const auto data = generate_dataset(tiny_scene(), 1).scenes;
  auto cfg = tiny_train();
  cfg.mask_ratio = 0.0;
  cfg.views.crop_fraction = 1.0;
  cfg.views.rotation_max = cfg.views.scale_range = cfg.views.position_jitter = cfg.views.feature_jitter = 0.0;
  cfg.tau_student = cfg.tau_teacher = 0.1;
  const TrainState s = init_state(cfg, 6);
  const auto batch = prepare_batch(s, ptrs(data), 0, 10);
  const auto& pv = batch.views[0];
  const Mat zs = encode(s.student, pv.input.graph, student_input_matrix(pv.input, s.student.value("mask_token")), cfg.encoder);
  const auto grid = voxelize(data[0].positions, data[0].features, cfg.voxel_size);
  const Mat zt = encode(s.teacher, grid, cfg.encoder);
  CHECK(zs == zt);
  CHECK(similarity(zs, s.student.value("prototypes"), 0.1).cosine ==
        similarity(zt, s.teacher.value("prototypes"), 0.1).cosine);

  // Loss = mean target-column entropy + KL diagnostic, with KL >= 0.
  ParamStore student = s.student;
  const auto loss = student_loss(student, batch, cfg);
  double h = 0.0;
  const Mat& T = pv.targets.same.target;
  for (Eigen::Index i = 0; i < T.size(); ++i) h -= T.data()[i] * std::log(T.data()[i]);
  h /= static_cast<double>(T.cols());
  const auto r = view_pair_loss(cfg.objective, zs, s.student.value("prototypes"), pv.targets, cfg.tau_student, false);
  CHECK(r.same == doctest::Approx(h + r.kl).epsilon(1e-12));
  CHECK(r.kl >= 0.0);
  CHECK(loss.total > 0.0);

  // With the student's own softmap as the target, the loss is exactly its entropy.
  ViewTargets self;
  self.same.rows = pv.targets.same.rows;
  self.same.target = softmap_normalize(similarity(zs, s.student.value("prototypes"), 0.1)).p;
  const auto own = view_pair_loss(cfg.objective, zs, s.student.value("prototypes"), self, 0.1, false);
  CHECK(std::abs(own.kl) < 1e-10);
}

TEST_CASE("feature regression with identical views is zero at init") {
  const auto data = generate_dataset(tiny_scene(), 2).scenes;
  auto cfg = tiny_train();
  cfg.objective = ObjectiveMode::FeatureRegression;
  cfg.mask_ratio = 0.0;
  cfg.views.crop_fraction = 1.0;
  cfg.views.rotation_max = cfg.views.scale_range = cfg.views.position_jitter = cfg.views.feature_jitter = 0.0;
  TrainState s = init_state(cfg, 6);
  ParamStore student = s.student;
  const auto loss = student_loss(student, prepare_batch(s, ptrs(data), 0, 10), cfg);
  CHECK(std::abs(loss.total) < 1e-12);
}

TEST_CASE("observable mode ignores masked point contents") {
  const auto data = generate_dataset(tiny_scene(), 2).scenes;
  for (auto objective : {ObjectiveMode::SoftmapZipf, ObjectiveMode::Clustering, ObjectiveMode::FeatureRegression}) {
    auto cfg = tiny_train();
    cfg.objective = objective;
    TrainState a = init_state(cfg, 6), b = a;
    for (int step = 0; step < 3; ++step) {
      const auto ma = train_step(a, ptrs(data), 6);
      const auto mb = train_step(b, ptrs(data), 6, scramble(100 + static_cast<std::uint64_t>(step)));
      CHECK(bitwise_equal(ma.loss_total, mb.loss_total));
      for (std::size_t i = 0; i < a.student.size(); ++i) {
        CHECK(a.student.arrays()[i].grad == b.student.arrays()[i].grad);
        CHECK(a.student.arrays()[i].value == b.student.arrays()[i].value);
      }
    }
  }
}

TEST_CASE("masked naive mode leaks masked coordinates") {
  const auto data = generate_dataset(tiny_scene(), 2).scenes;
  auto cfg = tiny_train();
  cfg.supervision = SupervisionMode::MaskedNaive;
  cfg.objective = ObjectiveMode::Clustering;
  TrainState a = init_state(cfg, 6), b = a;
  // Coordinates only: features are replaced by the token anyway.
  StudentViewHook shift = [](View& v, const MaskSpec& m, int, int) {
    for (std::size_t i = 0; i < v.size(); ++i)
      if (m.masked[i]) v.positions(static_cast<Eigen::Index>(i), 2) += 0.05 * static_cast<double>(i % 5);
  };
  const auto ma = train_step(a, ptrs(data), 4);
  const auto mb = train_step(b, ptrs(data), 4, shift);
  CHECK(ma.loss_total != mb.loss_total);
}

TEST_CASE("masked token forward") {
  const auto data = generate_dataset(tiny_scene(), 1).scenes;
  auto cfg = tiny_train();
  cfg.token_jitter = 0.0;
  const TrainState s = init_state(cfg, 6);
  const auto [va, vb] = make_views(data[0], cfg.views, 3);
  const auto mask = block_mask(va, 0.7, 1.0, 4);
  const Mat naive = masked_token_forward(s, va, mask, SupervisionMode::MaskedNaive, 9);
  const Mat jitter0 = masked_token_forward(s, va, mask, SupervisionMode::MaskedJitter, 9);
  CHECK(naive == jitter0);
  CHECK_THROWS_AS(masked_token_forward(s, va, mask, SupervisionMode::Observable, 9), ConfigError);

  CHECK(s.student.value("mask_token").isZero());
  const auto in = build_student_input(va, mask, SupervisionMode::MaskedNaive, cfg.voxel_size, 0.0, 1, cfg.encoder);
  const Mat x = student_input_matrix(in, s.student.value("mask_token"));
  for (int v : in.supervised) CHECK(x.row(v).head(6) == x.row(in.supervised.front()).head(6));

  cfg.token_jitter = 0.2;
  TrainState sj = init_state(cfg, 6);
  CHECK(masked_token_forward(sj, va, mask, SupervisionMode::MaskedJitter, 9) != naive);
}

TEST_CASE("loss total is the mean over scenes of L1 + L2") {
  const auto data = generate_dataset(tiny_scene(), 2).scenes;
  const auto cfg = tiny_train();
  TrainState s = init_state(cfg, 6);
  const auto batch = prepare_batch(s, ptrs(data), 0, 6);
  ParamStore student = s.student;
  const auto loss = student_loss(student, batch, cfg);
  REQUIRE(loss.per_view.size() == 4);
  double recomputed = 0.0;
  for (const auto& pv : batch.views) {
    const Mat z = encode(s.student, pv.input.graph, student_input_matrix(pv.input, s.student.value("mask_token")),
                         cfg.encoder);
    recomputed += view_pair_loss(cfg.objective, z, s.student.value("prototypes"), pv.targets, cfg.tau_student,
                                 cfg.cross_view)
                      .value;
  }
  CHECK(std::abs(loss.total - recomputed / 2.0) < 1e-14);
}

TEST_CASE("teacher receives no gradient and targets ignore student parameters") {
  const auto data = generate_dataset(tiny_scene(), 2).scenes;
  const auto cfg = tiny_train();
  TrainState s = init_state(cfg, 6);
  const auto batch = prepare_batch(s, ptrs(data), 0, 6);
  ParamStore g1 = s.student;
  student_loss(g1, batch, cfg);
  // Perturbing the teacher after targets are prepared changes no gradient.
  for (auto& a : s.teacher.arrays()) a.value.array() += 0.3;
  ParamStore g2 = s.student;
  student_loss(g2, batch, cfg);
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1.arrays()[i].grad == g2.arrays()[i].grad);
  for (const auto& a : s.teacher.arrays()) CHECK(a.grad.isZero());

  // Perturbing the student leaves prepared targets untouched.
  TrainState t = init_state(cfg, 6);
  for (auto& a : t.student.arrays()) a.value.array() += 0.3;
  const auto batch2 = prepare_batch(t, ptrs(data), 0, 6);
  CHECK(batch2.views[0].targets.same.target == prepare_batch(init_state(cfg, 6), ptrs(data), 0, 6).views[0].targets.same.target);
}

TEST_CASE("teacher follows the EMA of the student trajectory") {
  const auto data = generate_dataset(tiny_scene(), 4).scenes;
  auto cfg = tiny_train();
  cfg.ema_base = 0.9;
  cfg.optimizer.lr = 1e-2;
  TrainState s = init_state(cfg, 6);
  const ParamStore t0 = s.teacher;
  std::vector<ParamStore> students;
  std::vector<double> momenta;
  PretrainOptions opts;
  opts.on_step = [&](const StepMetrics& m) {
    momenta.push_back(m.ema_m);
    students.push_back(s.student);
  };
  opts.stop_after = 10;
  cfg.epochs = 10;
  s.config = cfg;
  pretrain(s, data, opts);
  REQUIRE(students.size() == 10);
  ParamStore replay = t0;
  for (std::size_t n = 0; n < students.size(); ++n) ema_update(replay, students[n], momenta[n]);
  CHECK(replay == s.teacher);

  // Closed form: t_N = prod(m) t_0 + sum_n (1 - m_n) prod_{j>n} m_j s_n.
  for (std::size_t a = 0; a < t0.size(); ++a) {
    Mat closed = t0.arrays()[a].value;
    double prod_all = 1.0;
    for (double m : momenta) prod_all *= m;
    closed *= prod_all;
    for (std::size_t n = 0; n < students.size(); ++n) {
      double tail = 1.0;
      for (std::size_t j = n + 1; j < momenta.size(); ++j) tail *= momenta[j];
      closed += (1.0 - momenta[n]) * tail * students[n].arrays()[a].value;
    }
    CHECK((closed - s.teacher.arrays()[a].value).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("prototype rows stay unit norm") {
  const auto data = generate_dataset(tiny_scene(), 2).scenes;
  auto cfg = tiny_train();
  cfg.optimizer.lr = 5e-2;
  TrainState s;
  PretrainOptions opts;
  double worst = 0.0;
  opts.on_step = [&](const StepMetrics&) {
    const Mat& q = s.student.value("prototypes");
    for (Eigen::Index k = 0; k < q.rows(); ++k) worst = std::max(worst, std::abs(q.row(k).norm() - 1.0));
  };
  s = init_state(cfg, 6);
  pretrain(s, data, opts);
  CHECK(worst < 1e-9);
}

TEST_CASE("checkpoint round trip and split runs") {
  const auto data = generate_dataset(tiny_scene(), 4).scenes;
  auto cfg = tiny_train();
  cfg.epochs = 5;  // 10 steps
  const auto dir = scratch("ckpt");

  TrainState full;
  const auto log_full = pretrain(cfg, data, full);
  REQUIRE(log_full.size() == 10);

  TrainState half = init_state(cfg, 6);
  PretrainOptions opts;
  opts.stop_after = 5;
  pretrain(half, data, opts);
  save_checkpoint(half, dir / "c.json");
  TrainState loaded = load_checkpoint(dir / "c.json");
  CHECK(loaded.student == half.student);
  CHECK(loaded.teacher == half.teacher);
  CHECK(loaded.step == half.step);
  CHECK(loaded.optimizer.steps() == half.optimizer.steps());
  for (std::size_t i = 0; i < half.student.size(); ++i) {
    CHECK(loaded.optimizer.first_moments()[i] == half.optimizer.first_moments()[i]);
    CHECK(loaded.optimizer.second_moments()[i] == half.optimizer.second_moments()[i]);
  }
  const auto log_rest = pretrain(loaded, data);
  REQUIRE(log_rest.size() == 5);
  CHECK(bitwise_equal(log_rest.back().loss_total, log_full.back().loss_total));
  CHECK(loaded.student == full.student);
  CHECK(loaded.teacher == full.teacher);

  {
    std::ifstream in(dir / "c.json");
    auto j = json::parse(in);
    j["version"] = 2;
    std::ofstream(dir / "v2.json") << j.dump();
  }
  try {
    load_checkpoint(dir / "v2.json");
    FAIL("expected version error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
  std::ofstream(dir / "broken.json") << "{\"version\": 1, \"config\": ";
  CHECK_THROWS_AS(load_checkpoint(dir / "broken.json"), ParseError);
  fs::remove_all(dir);
}

TEST_CASE("pretraining is deterministic and logs every step") {
  const auto data = generate_dataset(tiny_scene(), 3).scenes;
  auto cfg = tiny_train();
  cfg.epochs = 2;
  const auto dir = scratch("metrics");
  TrainState a, b;
  PretrainOptions opts;
  opts.metrics_path = dir / "m.jsonl";
  const auto la = pretrain(cfg, data, a, opts);
  const auto lb = pretrain(cfg, data, b);
  CHECK(a.student == b.student);
  CHECK(la.size() == 4);
  std::ifstream in(dir / "m.jsonl");
  int lines = 0;
  for (std::string line; std::getline(in, line); ++lines) {
    const auto j = json::parse(line);
    for (const char* k : {"step", "epoch", "loss_total", "loss_same", "loss_cross", "kl_diag", "proto_usage_entropy",
                          "row_spread", "ema_m", "alpha", "achieved_mask_ratio"})
      CHECK(j.contains(k));
    CHECK(j["step"] == lines);
  }
  CHECK(lines == 4);
  fs::remove_all(dir);
}

TEST_CASE("batches cover every scene once per epoch") {
  TrainConfig c;
  c.batch_size = 3;
  std::vector<int> seen;
  for (std::int64_t s = 0; s < steps_per_epoch(c, 10); ++s)
    for (int i : batch_indices(c, 10, s)) seen.push_back(i);
  std::sort(seen.begin(), seen.end());
  CHECK(seen == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  CHECK(steps_per_epoch(c, 10) == 4);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.mask_ratio = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.tau_teacher = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(supervision_mode_from_string("masked_jitter") == SupervisionMode::MaskedJitter);
  CHECK_THROWS_AS(supervision_mode_from_string("masked"), ConfigError);
}

TEST_CASE("gradient check of a full step") {
  SceneConfig sc = tiny_scene(64);
  const auto data = generate_dataset(sc, 2).scenes;
  auto cfg = tiny_train();
  const TrainState s = init_state(cfg, 6);
  CHECK(check_step_gradients(s, data, 1e-6).max_rel_error() < 1e-4);
}

TEST_CASE("default toy run: smoothed loss decreases over the first ten epochs") {
  SceneConfig sc;
  sc.num_points = 2048;
  const auto data = generate_dataset(sc, 200).scenes;
  TrainConfig cfg;
  cfg.epochs = 50;
  TrainState s = init_state(cfg, sc.feature_dim);
  PretrainOptions opts;
  opts.stop_after = 10 * steps_per_epoch(cfg, data.size());
  const auto log = pretrain(s, data, opts);
  std::vector<double> epoch_mean(10, 0.0);
  for (const auto& m : log) epoch_mean[static_cast<std::size_t>(m.epoch)] += m.loss_total / steps_per_epoch(cfg, data.size());
  for (std::size_t e = 1; e < epoch_mean.size(); ++e) {
    INFO("epoch " << e << ": " << epoch_mean[e - 1] << " -> " << epoch_mean[e]);
    CHECK(epoch_mean[e] < epoch_mean[e - 1]);
  }
}
