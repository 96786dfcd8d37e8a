#include "dos/ablation.hpp"
#include "dos/config.hpp"
#include "dos/errors.hpp"
#include "dos/probe.hpp"
#include "dos/scenegen.hpp"
#include "dos/trainer.hpp"
#include "dos/transport.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using dos::json;

namespace {

void diag(const std::string& level, const std::string& kind, const std::string& message, const json& extra = {}) {
  json j = {{"level", level}, {"kind", kind}, {"message", message}};
  if (extra.is_object())
    for (const auto& [k, v] : extra.items()) j[k] = v;
  std::cerr << j.dump() << "\n";
}

dos::RunConfig config_or_default(const std::string& path) {
  if (path.empty()) {
    dos::RunConfig c;
    c.validate();
    return c;
  }
  return dos::load_run_config(path);
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw dos::Error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

int cmd_gen_data(const std::string& config, const std::string& out) {
  const auto run = config_or_default(config);
  const auto dataset = dos::generate_dataset(run.scene, run.num_scenes);
  dos::export_scenes(dataset, out);
  std::cout << json{{"out", out}, {"num_scenes", dataset.scenes.size()}}.dump() << "\n";
  return 0;
}

int cmd_pretrain(const std::string& config, const std::string& data, const std::string& out, bool resume) {
  const auto run = config_or_default(config);
  const auto dataset = dos::import_scenes(data);
  const auto split = dos::split_dataset(dataset, run.probe.train_fraction);
  const fs::path dir(out);
  fs::create_directories(dir);
  const fs::path ckpt = dir / "checkpoint.json";
  const fs::path metrics = dir / "metrics.jsonl";

  dos::TrainState state;
  if (resume && fs::exists(ckpt)) {
    state = dos::load_checkpoint(ckpt);
    if (dos::config_hash(dos::train_config_to_json(state.config)) !=
        dos::config_hash(dos::train_config_to_json(run.train)))
      throw dos::ConfigError("checkpoint config differs from --config", "/train");
    // drop records past the checkpoint
    std::vector<std::string> keep;
    std::ifstream in(metrics);
    for (std::string line; std::getline(in, line);)
      if (!line.empty() && json::parse(line).at("step").get<std::int64_t>() < state.step) keep.push_back(line);
    in.close();
    std::ofstream rewrite(metrics, std::ios::trunc);
    for (const auto& l : keep) rewrite << l << "\n";
  } else {
    state = dos::init_state(run.train, static_cast<int>(dataset.config.feature_dim));
    std::ofstream(metrics, std::ios::trunc);
  }
  dos::PretrainOptions opts;
  opts.checkpoint_dir = dir;
  opts.metrics_path = metrics;
  const auto log = dos::pretrain(state, split.train, opts);
  std::cout << json{{"checkpoint", ckpt.string()},
                    {"steps", state.step},
                    {"final_loss", log.empty() ? json(nullptr) : json(log.back().loss_total)}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_probe(const std::string& ckpt, const std::string& data, const std::string& out, const std::string& config) {
  const auto run = config_or_default(config);
  const auto state = dos::load_checkpoint(ckpt);
  const auto dataset = dos::import_scenes(data);
  const auto split = dos::split_dataset(dataset, run.probe.train_fraction);
  const auto& params = run.probe.params == "student" ? state.student : state.teacher;
  const auto r = dos::run_probe(params, state.config.encoder, state.config.voxel_size, split.train, split.eval,
                                split.num_classes, run.probe);
  json per_class = json::array();
  for (std::size_t c = 0; c < r.iou.size(); ++c)
    per_class.push_back({{"class", c}, {"present", static_cast<bool>(r.present[c])},
                         {"iou", r.present[c] ? json(r.iou[c]) : json(nullptr)}});
  const json result = {
      {"config_hash", dos::config_hash(dos::train_config_to_json(state.config))},
      {"checkpoint", ckpt},
      {"mIoU", r.miou},
      {"mAcc", r.macc},
      {"acc", r.acc},
      {"per_class", per_class},
      {"head_common_tail", {r.head, r.common, r.tail}},
  };
  write_json(out, result);
  std::cout << json{{"mIoU", r.miou}, {"mAcc", r.macc}, {"acc", r.acc}}.dump() << "\n";
  return 0;
}

int cmd_ablate(const std::string& suite, int seeds, const std::string& out, const std::string& config) {
  const auto run = config.empty() ? dos::benchmark_config() : dos::load_run_config(config);
  const auto variants = dos::suite_variants(suite, run.train);
  const auto data = dos::make_benchmark_data(run);
  const auto rows = dos::run_suite(variants, seeds, data, run.probe, dos::worker_threads());
  dos::write_ablation_csv(rows, out);
  for (const auto& r : rows)
    if (!r.ok) diag("warning", "variant_failed", r.error, {{"variant", r.variant}, {"seed", r.seed}});
  for (const auto& s : dos::summarize(rows))
    std::cout << json{{"variant", s.variant}, {"runs", s.runs}, {"mIoU", s.miou}, {"tail_mIoU", s.tail}}.dump()
              << "\n";
  return 0;
}

int cmd_sinkhorn(int n, int k, double alpha, int iters, std::uint64_t seed) {
  if (n < 1 || k < 1) throw dos::ConfigError("n and k must be >= 1", "/n");
  if (iters < 0) throw dos::ConfigError("iters must be >= 0", "/iters");
  if (!(alpha >= 0.0)) throw dos::ConfigError("alpha must be >= 0", "/alpha");
  dos::Rng rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  dos::Mat F(n, k);
  for (Eigen::Index i = 0; i < F.size(); ++i) F.data()[i] = std::exp(n01(rng));
  const auto prior = dos::zipf_prior(k, alpha);
  const auto res = dos::zipf_sinkhorn_full(F, prior, iters);
  const auto d = dos::sinkhorn_diagnostics(res.balanced, prior);
  double col_err = 0.0;
  for (Eigen::Index c = 0; c < res.softmap.cols(); ++c)
    col_err = std::max(col_err, std::abs(res.softmap.col(c).sum() - 1.0));
  std::cout << json{{"n", n},
                    {"k", k},
                    {"alpha", alpha},
                    {"iters", iters},
                    {"seed", seed},
                    {"prior", prior.weights},
                    {"column_deviation", d.column_deviation},
                    {"row_spread", d.row_spread},
                    {"softmap_column_error", col_err}}
                   .dump(2)
            << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& config, double eps) {
  auto run = config_or_default(config);
  const auto dataset = dos::generate_dataset(run.scene, 2);
  const auto state = dos::init_state(run.train, run.scene.feature_dim);
  const auto report = dos::check_step_gradients(state, dataset.scenes, eps);
  json arrays = json::array();
  for (const auto& e : report.entries)
    arrays.push_back({{"name", e.name}, {"max_rel_error", e.max_rel_error}, {"max_abs_grad", e.max_abs_analytic}});
  std::cout << json{{"eps", eps}, {"max_rel_error", report.max_rel_error()}, {"arrays", arrays}}.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dos: observable-point self-distillation on synthetic point clouds"};
  app.require_subcommand(1);

  std::string config, out, data, ckpt, suite;
  bool resume = false;
  int seeds = 3, n = 64, k = 8, iters = 3;
  double alpha = 1.3, eps = 1e-6;
  std::uint64_t seed = 0;

  auto* gen = app.add_subcommand("gen-data", "generate a labeled scene dataset");
  gen->add_option("--config", config, "run config JSON");
  gen->add_option("--out", out, "output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "self-distillation pretraining");
  pre->add_option("--config", config, "run config JSON");
  pre->add_option("--data", data, "dataset directory")->required();
  pre->add_option("--out", out, "output directory")->required();
  pre->add_flag("--resume", resume, "continue from <out>/checkpoint.json");

  auto* prb = app.add_subcommand("probe", "linear probe on frozen features");
  prb->add_option("--ckpt", ckpt, "checkpoint JSON")->required();
  prb->add_option("--data", data, "dataset directory")->required();
  prb->add_option("--out", out, "results JSON")->required();
  prb->add_option("--config", config, "run config JSON (probe section)");

  auto* abl = app.add_subcommand("ablate", "run an ablation suite");
  abl->add_option("--suite", suite, "components | zipf | protos | crossview")->required();
  abl->add_option("--seeds", seeds, "seeds per variant");
  abl->add_option("--out", out, "CSV path")->required();
  abl->add_option("--config", config, "run config JSON");

  auto* snk = app.add_subcommand("sinkhorn", "Zipf-Sinkhorn diagnostics on a random positive matrix");
  snk->add_option("--n", n);
  snk->add_option("--k", k);
  snk->add_option("--alpha", alpha);
  snk->add_option("--iters", iters);
  snk->add_option("--seed", seed);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of one training step");
  gc->add_option("--config", config, "run config JSON");
  gc->add_option("--eps", eps);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    diag("error", "usage", e.what());
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(config, out);
    if (pre->parsed()) return cmd_pretrain(config, data, out, resume);
    if (prb->parsed()) return cmd_probe(ckpt, data, out, config);
    if (abl->parsed()) return cmd_ablate(suite, seeds, out, config);
    if (snk->parsed()) return cmd_sinkhorn(n, k, alpha, iters, seed);
    if (gc->parsed()) return cmd_gradcheck(config, eps);
  } catch (const dos::ConfigError& e) {
    diag("error", "config", e.what(), {{"path", e.path()}});
    return 1;
  } catch (const dos::ParseError& e) {
    diag("error", "parse", e.what(), {{"line", e.line()}});
    return 2;
  } catch (const std::exception& e) {
    diag("error", "runtime", e.what());
    return 2;
  }
  return 1;
}
