#include "dos/trainer.hpp"

#include "dos/config.hpp"
#include "dos/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

namespace dos {

std::string to_string(SupervisionMode m) {
  switch (m) {
    case SupervisionMode::Observable: return "observable";
    case SupervisionMode::MaskedNaive: return "masked_naive";
    case SupervisionMode::MaskedJitter: return "masked_jitter";
  }
  return "?";
}

SupervisionMode supervision_mode_from_string(const std::string& s) {
  if (s == "observable") return SupervisionMode::Observable;
  if (s == "masked_naive") return SupervisionMode::MaskedNaive;
  if (s == "masked_jitter") return SupervisionMode::MaskedJitter;
  throw ConfigError("unknown supervision mode '" + s + "'", "/mask/supervision");
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0", "/train/epochs");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1", "/train/batch_size");
  if (!(optimizer.lr >= 0.0)) throw ConfigError("lr must be >= 0", "/train/lr");
  if (!(optimizer.weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0", "/train/weight_decay");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0)) throw ConfigError("beta1 must be in [0, 1)", "/train/beta1");
  if (!(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) throw ConfigError("beta2 must be in [0, 1)", "/train/beta2");
  if (!(optimizer.eps > 0.0)) throw ConfigError("adam_eps must be positive", "/train/adam_eps");
  if (!(ema_base >= 0.0 && ema_base <= 1.0)) throw ConfigError("ema_base must be in [0, 1]", "/train/ema_base");
  if (!(ema_final >= 0.0 && ema_final <= 1.0)) throw ConfigError("ema_final must be in [0, 1]", "/train/ema_final");
  if (!(tau_student > 0.0)) throw ConfigError("tau_student must be positive", "/objective/tau_student");
  if (!(tau_teacher > 0.0)) throw ConfigError("tau_teacher must be positive", "/objective/tau_teacher");
  if (prototypes < 1) throw ConfigError("prototypes must be >= 1", "/objective/prototypes");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw ConfigError("ratio must be in [0, 1)", "/mask/ratio");
  if (!(block_size > 0.0)) throw ConfigError("block_size must be positive", "/mask/block_size");
  if (!(token_jitter >= 0.0)) throw ConfigError("token_jitter must be >= 0", "/mask/token_jitter");
  if (!(voxel_size > 0.0)) throw ConfigError("voxel_size must be positive", "/train/voxel_size");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0", "/train/checkpoint_every");
  transport.validate();
  views.validate();
  encoder.validate();
}

namespace {

void init_head(ParamStore& store, const TrainConfig& config, int feature_dim) {
  Mat& protos = store.add("prototypes", config.prototypes, config.encoder.embed, false);
  Rng rng(derive_seed(config.seed, {0x70726f74ULL}));
  std::normal_distribution<double> n01(0.0, 1.0);
  for (Eigen::Index i = 0; i < protos.size(); ++i) protos.data()[i] = n01(rng);
  renormalize_prototypes(protos, rng);
  store.add("mask_token", 1, feature_dim, false);
}

double entropy_of_counts(const std::vector<double>& counts) {
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (double c : counts)
    if (c > 0.0) h -= (c / total) * std::log(c / total);
  return h;
}

/// Each output row averages the listed rows of `emb`; a list naming one
/// distinct row copies it exactly.
Mat pool_rows(const Mat& emb, const std::vector<std::vector<int>>& lists) {
  Mat out(static_cast<Eigen::Index>(lists.size()), emb.cols());
  for (std::size_t r = 0; r < lists.size(); ++r) {
    const auto& l = lists[r];
    const bool single = std::all_of(l.begin(), l.end(), [&](int v) { return v == l.front(); });
    if (single) {
      out.row(static_cast<Eigen::Index>(r)) = emb.row(l.front());
    } else {
      RowVec acc = RowVec::Zero(emb.cols());
      for (int v : l) acc += emb.row(v);
      out.row(static_cast<Eigen::Index>(r)) = acc / static_cast<double>(l.size());
    }
  }
  return out;
}

/// Parent-matched partner in `b` for every view-local index of `a`, or -1.
std::vector<int> partners(const View& a, const View& b) {
  std::vector<int> out(a.size(), -1);
  std::size_t j = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    while (j < b.parent.size() && b.parent[j] < a.parent[i]) ++j;
    if (j < b.parent.size() && b.parent[j] == a.parent[i]) out[i] = static_cast<int>(j);
  }
  return out;
}

}  // namespace

TrainState init_state(const TrainConfig& config, int feature_dim) {
  config.validate();
  if (config.encoder.input_width != feature_dim + 3)
    throw ConfigError("encoder input_width must equal feature_dim + 3", "/encoder/input_width");
  TrainState s;
  s.config = config;
  init_encoder_params(s.student, config.encoder, derive_seed(config.seed, {0x656e63ULL}));
  init_head(s.student, config, feature_dim);
  s.teacher = s.student;
  s.optimizer = AdamW(s.student, config.optimizer);
  return s;
}

Schedule schedule(std::int64_t step, std::int64_t total_steps, const TrainConfig& config) {
  Schedule out;
  const double frac = total_steps > 0 ? std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0)
                                      : 0.0;
  out.momentum = config.ema_final - (config.ema_final - config.ema_base) * (std::cos(std::numbers::pi * frac) + 1.0) / 2.0;
  out.alpha = config.transport.alpha_schedule
                  ? config.transport.alpha + (config.transport.alpha_final - config.transport.alpha) * frac
                  : config.transport.alpha;
  return out;
}

std::int64_t steps_per_epoch(const TrainConfig& config, std::size_t num_scenes) {
  return static_cast<std::int64_t>((num_scenes + static_cast<std::size_t>(config.batch_size) - 1) /
                                   static_cast<std::size_t>(config.batch_size));
}

std::vector<int> batch_indices(const TrainConfig& config, std::size_t num_scenes, std::int64_t step) {
  const std::int64_t spe = steps_per_epoch(config, num_scenes);
  const std::int64_t epoch = step / spe;
  const std::int64_t j = step % spe;
  std::vector<int> order(num_scenes);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(config.seed, {0x65706f6368ULL, static_cast<std::uint64_t>(epoch)}));
  std::shuffle(order.begin(), order.end(), rng);
  const auto begin = static_cast<std::size_t>(j * config.batch_size);
  const auto end = std::min(num_scenes, begin + static_cast<std::size_t>(config.batch_size));
  return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

StudentInput build_student_input(const View& view, const MaskSpec& mask, SupervisionMode mode, double voxel_size,
                                 double token_jitter, std::uint64_t jitter_seed, const EncoderConfig& encoder) {
  StudentInput in;
  const auto d = view.features.cols();
  if (mode == SupervisionMode::Observable) {
    if (mask.visible.empty()) throw GeometryError("build_student_input: empty visible set");
    in.point_index = mask.visible;
    in.grid = voxelize(gather_rows(view.positions, mask.visible), gather_rows(view.features, mask.visible), voxel_size);
    in.base_input = in.grid.pooled;
    in.token_share.assign(in.grid.size(), 0.0);
    in.supervised.resize(in.grid.size());
    std::iota(in.supervised.begin(), in.supervised.end(), 0);
  } else {
    const auto n = static_cast<Eigen::Index>(view.size());
    in.point_index.resize(view.size());
    std::iota(in.point_index.begin(), in.point_index.end(), 0);
    Mat pos = view.positions;
    Mat feat = view.features;
    Rng rng(jitter_seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!mask.masked[static_cast<std::size_t>(i)]) continue;
      feat.row(i).setZero();
      if (mode == SupervisionMode::MaskedJitter && token_jitter > 0.0)
        for (int a = 0; a < 3; ++a) pos(i, a) += token_jitter * n01(rng);
    }
    in.grid = voxelize(pos, feat, voxel_size);
    in.base_input = in.grid.pooled;
    in.token_share.resize(in.grid.size());
    for (std::size_t v = 0; v < in.grid.size(); ++v) {
      const auto& mem = in.grid.members[v];
      const auto masked = std::count_if(mem.begin(), mem.end(), [&](int i) { return mask.masked[i]; });
      in.token_share[v] = static_cast<double>(masked) / static_cast<double>(mem.size());
      if (masked == static_cast<std::ptrdiff_t>(mem.size())) in.supervised.push_back(static_cast<int>(v));
    }
    if (in.supervised.empty()) throw GeometryError("build_student_input: no fully masked voxel to supervise");
    (void)d;
  }
  in.graph = build_graph(in.grid.coords, encoder);
  return in;
}

Mat student_input_matrix(const StudentInput& in, const Mat& mask_token) {
  Mat x = in.base_input;
  for (std::size_t v = 0; v < in.token_share.size(); ++v)
    if (in.token_share[v] > 0.0)
      x.row(static_cast<Eigen::Index>(v)).head(mask_token.cols()) += in.token_share[v] * mask_token.row(0);
  return x;
}

Mat masked_token_forward(const TrainState& state, const View& view, const MaskSpec& mask, SupervisionMode mode,
                         std::uint64_t jitter_seed) {
  if (mode == SupervisionMode::Observable) throw ConfigError("masked_token_forward needs a masked-token mode");
  const auto& cfg = state.config;
  const StudentInput in =
      build_student_input(view, mask, mode, cfg.voxel_size, cfg.token_jitter, jitter_seed, cfg.encoder);
  const Mat z = encode(state.student, in.graph, student_input_matrix(in, state.student.value("mask_token")), cfg.encoder);
  return gather_rows(z, in.supervised);
}

PreparedBatch prepare_batch(const TrainState& state, const std::vector<const LabeledCloud*>& scenes,
                            std::int64_t step, std::int64_t total_steps, const StudentViewHook& hook) {
  const TrainConfig& cfg = state.config;
  const Schedule sched = schedule(step, total_steps, cfg);
  const double alpha = cfg.objective == ObjectiveMode::SoftmapUniform ? 0.0 : sched.alpha;
  const Mat& teacher_protos = state.teacher.value("prototypes");
  const int K = static_cast<int>(teacher_protos.rows());

  PreparedBatch batch;
  batch.alpha = alpha;
  batch.momentum = sched.momentum;

  // Clustering targets are balanced jointly over the batch; gather cosines first.
  std::vector<Mat> cluster_cos;
  std::vector<Mat*> cluster_dst;

  const bool softmap = cfg.objective == ObjectiveMode::SoftmapZipf || cfg.objective == ObjectiveMode::SoftmapUniform;
  const ZipfPrior prior = zipf_prior(K, alpha);

  for (std::size_t si = 0; si < scenes.size(); ++si) {
    const std::uint64_t scene_seed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(step), si});
    auto [va, vb] = make_views(*scenes[si], cfg.views, derive_seed(scene_seed, {1}));
    const View* views[2] = {&va, &vb};
    MaskSpec masks[2];
    VoxelGrid tgrid[2];
    Mat temb[2];
    for (int a = 0; a < 2; ++a) {
      masks[a] = block_mask(*views[a], cfg.mask_ratio, cfg.block_size, derive_seed(scene_seed, {2, static_cast<std::uint64_t>(a)}));
      tgrid[a] = voxelize(views[a]->positions, views[a]->features, cfg.voxel_size);
      temb[a] = encode(state.teacher, build_graph(tgrid[a].coords, cfg.encoder), tgrid[a].pooled, cfg.encoder);
    }
    for (int a = 0; a < 2; ++a) {
      const int b = 1 - a;
      View student_view = *views[a];
      if (hook) hook(student_view, masks[a], static_cast<int>(si), a);
      PreparedView pv;
      pv.achieved_mask_ratio = masks[a].achieved_ratio;
      pv.input = build_student_input(student_view, masks[a], cfg.supervision, cfg.voxel_size, cfg.token_jitter,
                                     derive_seed(scene_seed, {3, static_cast<std::uint64_t>(a)}), cfg.encoder);
      const StudentInput& in = pv.input;

      std::vector<int> partner = partners(*views[a], *views[b]);
      if (cfg.supervision == SupervisionMode::Observable) {
        // Pairs restricted to visible a-side points.
        std::fill(partner.begin(), partner.end(), -1);
        for (const auto& [ia, ib] : correspond(*views[a], masks[a], *views[b])) partner[ia] = ib;
      }

      std::vector<std::vector<int>> same_lists, cross_lists;
      for (int v : in.supervised) {
        std::vector<int> same, cross;
        for (int m : in.grid.members[v]) {
          const int local = in.point_index[m];
          same.push_back(tgrid[a].point_voxel[local]);
          if (partner[local] >= 0) cross.push_back(tgrid[b].point_voxel[partner[local]]);
        }
        same_lists.push_back(std::move(same));
        if (!cross.empty()) {
          pv.targets.cross.rows.push_back(v);
          cross_lists.push_back(std::move(cross));
        }
      }
      pv.targets.same.rows = in.supervised;
      pv.targets.has_cross = !cross_lists.empty();
      if (!pv.targets.has_cross) ++batch.cross_skipped;

      const Mat same_emb = pool_rows(temb[a], same_lists);
      const Mat cross_emb = pv.targets.has_cross ? pool_rows(temb[b], cross_lists) : Mat();

      {
        std::vector<double> usage(K, 0.0);
        const Mat cos = cosine_matrix(same_emb, teacher_protos);
        for (Eigen::Index i = 0; i < cos.rows(); ++i) {
          Eigen::Index k;
          cos.row(i).maxCoeff(&k);
          usage[k] += 1.0;
        }
        pv.usage_entropy = entropy_of_counts(usage);
      }

      if (softmap) {
        const auto same_s = similarity(same_emb, teacher_protos, cfg.tau_teacher);
        const auto r = zipf_sinkhorn_full(same_s.stabilized(), prior, cfg.transport.iterations);
        pv.targets.same.target = r.softmap;
        pv.row_spread = sinkhorn_diagnostics(r.balanced, prior).row_spread;
        if (pv.targets.has_cross)
          pv.targets.cross.target = zipf_sinkhorn(similarity(cross_emb, teacher_protos, cfg.tau_teacher).stabilized(),
                                                  prior, cfg.transport.iterations);
      } else if (cfg.objective == ObjectiveMode::Clustering) {
        cluster_cos.push_back(cosine_matrix(same_emb, teacher_protos));
        if (pv.targets.has_cross) cluster_cos.push_back(cosine_matrix(cross_emb, teacher_protos));
      } else {
        pv.targets.same.target = same_emb;
        if (pv.targets.has_cross) pv.targets.cross.target = cross_emb;
      }
      batch.views.push_back(std::move(pv));
    }
  }

  if (cfg.objective == ObjectiveMode::Clustering) {
    for (auto& pv : batch.views) {
      cluster_dst.push_back(&pv.targets.same.target);
      if (pv.targets.has_cross) cluster_dst.push_back(&pv.targets.cross.target);
    }
    Eigen::Index rows = 0;
    for (const auto& c : cluster_cos) rows += c.rows();
    Mat all(rows, K);
    Eigen::Index r0 = 0;
    for (const auto& c : cluster_cos) {
      all.middleRows(r0, c.rows()) = c;
      r0 += c.rows();
    }
    const Mat q = balanced_assignment(SimilarityMatrix{all, cfg.tau_teacher}.stabilized(), cfg.transport.iterations);
    r0 = 0;
    for (std::size_t i = 0; i < cluster_cos.size(); ++i) {
      *cluster_dst[i] = q.middleRows(r0, cluster_cos[i].rows());
      r0 += cluster_cos[i].rows();
    }
  }
  return batch;
}

BatchLoss student_loss(ParamStore& student, const PreparedBatch& batch, const TrainConfig& config) {
  BatchLoss out;
  const double num_scenes = static_cast<double>(batch.views.size() / 2);
  const double scale = 1.0 / num_scenes;
  const Mat& protos = student.value("prototypes");
  const Mat& token = student.value("mask_token");
  Mat d_protos = Mat::Zero(protos.rows(), protos.cols());
  Mat d_token = Mat::Zero(token.rows(), token.cols());
  const bool masked_mode = config.supervision != SupervisionMode::Observable;

  for (const auto& pv : batch.views) {
    EncoderCache cache;
    const Mat x = student_input_matrix(pv.input, token);
    const Mat z = encode(student, pv.input.graph, x, config.encoder, &cache);
    const ViewLossResult r = view_pair_loss(config.objective, z, protos, pv.targets, config.tau_student, config.cross_view);
    out.per_view.push_back(r.value);
    out.total += scale * r.value;
    out.same += scale * r.same;
    out.cross += scale * r.cross;
    out.kl += scale * r.kl;
    out.zero_norm_rows += r.zero_norm_rows;
    d_protos += scale * r.d_protos;
    const Mat dx = encode_backward(student, pv.input.graph, cache, scale * r.d_emb, config.encoder);
    if (masked_mode)
      for (std::size_t v = 0; v < pv.input.token_share.size(); ++v)
        if (pv.input.token_share[v] > 0.0)
          d_token.row(0) += pv.input.token_share[v] * dx.row(static_cast<Eigen::Index>(v)).head(token.cols());
  }
  student.grad("prototypes") += d_protos;
  student.grad("mask_token") += d_token;
  return out;
}

StepMetrics train_step(TrainState& state, const std::vector<const LabeledCloud*>& scenes, std::int64_t total_steps,
                       const StudentViewHook& hook) {
  const auto& cfg = state.config;
  StepMetrics m;
  m.step = state.step;
  PreparedBatch batch;
  BatchLoss loss;
  try {
    batch = prepare_batch(state, scenes, state.step, total_steps, hook);
    state.student.zero_grad();
    loss = student_loss(state.student, batch, cfg);
  } catch (const Error& e) {
    throw Error("step " + std::to_string(state.step) + ": " + e.what());
  }
  if (!std::isfinite(loss.total)) throw NumericError("step " + std::to_string(state.step) + ": non-finite loss");
  try {
    state.optimizer.step(state.student);
  } catch (const NumericError& e) {
    throw NumericError("step " + std::to_string(state.step) + ": " + e.what());
  }
  Rng rng(derive_seed(cfg.seed, {0x72656e6fULL, static_cast<std::uint64_t>(state.step)}));
  state.prototype_redraws += renormalize_prototypes(state.student.value("prototypes"), rng);
  ema_update(state.teacher, state.student, batch.momentum);

  m.loss_total = loss.total;
  m.loss_same = loss.same;
  m.loss_cross = loss.cross;
  m.kl_diag = loss.kl;
  m.ema_m = batch.momentum;
  m.alpha = batch.alpha;
  m.cross_skipped = batch.cross_skipped;
  for (const auto& pv : batch.views) {
    m.proto_usage_entropy += pv.usage_entropy / static_cast<double>(batch.views.size());
    m.row_spread = std::max(m.row_spread, pv.row_spread);
    m.achieved_mask_ratio += pv.achieved_mask_ratio / static_cast<double>(batch.views.size());
  }
  ++state.step;
  return m;
}

GradCheckReport check_step_gradients(const TrainState& state, const std::vector<LabeledCloud>& scenes, double eps) {
  std::vector<const LabeledCloud*> ptrs;
  for (const auto& s : scenes) ptrs.push_back(&s);
  const PreparedBatch batch = prepare_batch(state, ptrs, state.step, std::max<std::int64_t>(state.step, 1));
  const TrainConfig& cfg = state.config;
  return grad_check([&](ParamStore& p) { return student_loss(p, batch, cfg).total; }, state.student, eps);
}

std::string metrics_to_json_line(const StepMetrics& m) {
  const json j = {{"step", m.step},
                  {"epoch", m.epoch},
                  {"loss_total", m.loss_total},
                  {"loss_same", m.loss_same},
                  {"loss_cross", m.loss_cross},
                  {"kl_diag", m.kl_diag},
                  {"proto_usage_entropy", m.proto_usage_entropy},
                  {"row_spread", m.row_spread},
                  {"ema_m", m.ema_m},
                  {"alpha", m.alpha},
                  {"achieved_mask_ratio", m.achieved_mask_ratio}};
  return j.dump();
}

std::vector<StepMetrics> pretrain(TrainState& state, const std::vector<LabeledCloud>& scenes,
                                  const PretrainOptions& options) {
  if (scenes.empty()) throw Error("pretrain: empty dataset");
  const auto& cfg = state.config;
  const std::int64_t spe = steps_per_epoch(cfg, scenes.size());
  const std::int64_t total = spe * cfg.epochs;
  std::vector<StepMetrics> log;
  std::ofstream metrics;
  if (options.metrics_path) {
    metrics.open(*options.metrics_path, std::ios::app);
    if (!metrics) throw Error("pretrain: cannot open metrics file " + options.metrics_path->string());
  }
  if (options.checkpoint_dir) std::filesystem::create_directories(*options.checkpoint_dir);

  while (state.step < total && (options.stop_after < 0 || state.step < options.stop_after)) {
    std::vector<const LabeledCloud*> batch;
    for (int i : batch_indices(cfg, scenes.size(), state.step)) batch.push_back(&scenes[i]);
    const std::int64_t epoch = state.step / spe;
    StepMetrics m = train_step(state, batch, total, options.hook);
    m.epoch = epoch;
    if (metrics) metrics << metrics_to_json_line(m) << "\n" << std::flush;
    if (options.on_step) options.on_step(m);
    log.push_back(m);
    if (options.checkpoint_dir && cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0)
      save_checkpoint(state, *options.checkpoint_dir / ("checkpoint_" + std::to_string(state.step) + ".json"));
  }
  if (options.checkpoint_dir) save_checkpoint(state, *options.checkpoint_dir / "checkpoint.json");
  return log;
}

std::vector<StepMetrics> pretrain(const TrainConfig& config, const std::vector<LabeledCloud>& scenes,
                                  TrainState& out_state, const PretrainOptions& options) {
  if (scenes.empty()) throw Error("pretrain: empty dataset");
  out_state = init_state(config, static_cast<int>(scenes.front().features.cols()));
  return pretrain(out_state, scenes, options);
}

namespace {

json array_json(const Mat& m) {
  std::vector<double> values(m.data(), m.data() + m.size());
  return {{"shape", {m.rows(), m.cols()}}, {"values", values}};
}

void array_from_json(const json& j, Mat& m, const std::string& name) {
  const auto shape = j.at("shape").get<std::vector<Eigen::Index>>();
  const auto values = j.at("values").get<std::vector<double>>();
  if (shape.size() != 2 || shape[0] != m.rows() || shape[1] != m.cols() ||
      values.size() != static_cast<std::size_t>(m.size()))
    throw ParseError("checkpoint", 0, "shape mismatch for array '" + name + "'");
  std::copy(values.begin(), values.end(), m.data());
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  json arrays = json::object();
  const auto s = state.student.arrays();
  const auto t = state.teacher.arrays();
  for (std::size_t i = 0; i < s.size(); ++i) {
    arrays["student/" + s[i].name] = array_json(s[i].value);
    arrays["teacher/" + t[i].name] = array_json(t[i].value);
    arrays["adam_m/" + s[i].name] = array_json(state.optimizer.first_moments()[i]);
    arrays["adam_v/" + s[i].name] = array_json(state.optimizer.second_moments()[i]);
  }
  const json doc = {
      {"version", kCheckpointVersion},
      {"config", train_config_to_json(state.config)},
      {"counters",
       {{"step", state.step},
        {"optimizer_steps", state.optimizer.steps()},
        {"prototype_redraws", state.prototype_redraws},
        {"feature_dim", state.student.value("mask_token").cols()}}},
      {"arrays", arrays},
  };
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error("save_checkpoint: cannot write " + tmp);
    out << doc.dump() << "\n";
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open checkpoint");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string(), 0, std::string("corrupt checkpoint: ") + e.what());
  }
  try {
    const int version = doc.at("version").get<int>();
    if (version != kCheckpointVersion)
      throw ParseError(path.string(), 0,
                       "checkpoint version " + std::to_string(version) + " is not supported (expected " +
                           std::to_string(kCheckpointVersion) + ")");
    const TrainConfig cfg = train_config_from_json(doc.at("config"));
    const auto& counters = doc.at("counters");
    TrainState state = init_state(cfg, counters.at("feature_dim").get<int>());
    state.step = counters.at("step").get<std::int64_t>();
    state.prototype_redraws = counters.at("prototype_redraws").get<std::int64_t>();
    state.optimizer.set_steps(counters.at("optimizer_steps").get<std::int64_t>());
    const auto& arrays = doc.at("arrays");
    auto s = state.student.arrays();
    auto t = state.teacher.arrays();
    for (std::size_t i = 0; i < s.size(); ++i) {
      array_from_json(arrays.at("student/" + s[i].name), s[i].value, s[i].name);
      array_from_json(arrays.at("teacher/" + t[i].name), t[i].value, t[i].name);
      array_from_json(arrays.at("adam_m/" + s[i].name), state.optimizer.first_moments()[i], s[i].name);
      array_from_json(arrays.at("adam_v/" + s[i].name), state.optimizer.second_moments()[i], s[i].name);
    }
    return state;
  } catch (const json::exception& e) {
    throw ParseError(path.string(), 0, std::string("corrupt checkpoint: ") + e.what());
  }
}

}  // namespace dos
