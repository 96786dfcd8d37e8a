#include "dos/ablation.hpp"

#include "dos/errors.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <thread>

namespace dos {

std::vector<double> zipf_grid() { return {0.0, 0.1, 0.3, 0.6, 0.9, 1.3, 1.6, 2.0, 3.0}; }

std::vector<Variant> suite_variants(const std::string& suite, const TrainConfig& base) {
  std::vector<Variant> out;
  auto with = [&](std::string name, auto&& edit) {
    Variant v{std::move(name), base};
    edit(v.train);
    out.push_back(std::move(v));
  };
  if (suite == "components") {
    with("masked_naive", [](TrainConfig& t) {
      t.supervision = SupervisionMode::MaskedNaive;
      t.objective = ObjectiveMode::Clustering;
    });
    with("masked_jitter", [](TrainConfig& t) {
      t.supervision = SupervisionMode::MaskedJitter;
      t.objective = ObjectiveMode::Clustering;
    });
    with("observable+clustering", [](TrainConfig& t) { t.objective = ObjectiveMode::Clustering; });
    with("observable+feature_regression", [](TrainConfig& t) { t.objective = ObjectiveMode::FeatureRegression; });
    with("observable+softmap", [](TrainConfig& t) { t.objective = ObjectiveMode::SoftmapUniform; });
    with("observable+softmap+zipf", [](TrainConfig& t) { t.objective = ObjectiveMode::SoftmapZipf; });
  } else if (suite == "zipf") {
    for (double a : zipf_grid()) {
      char name[32];
      std::snprintf(name, sizeof name, "alpha=%.1f", a);
      with(name, [a](TrainConfig& t) {
        t.objective = ObjectiveMode::SoftmapZipf;
        t.transport.alpha = a;
        t.transport.alpha_final = a;
        t.transport.alpha_schedule = false;
      });
    }
  } else if (suite == "protos") {
    for (int k : {8, 16, 64, 256})
      with("K=" + std::to_string(k), [k](TrainConfig& t) { t.prototypes = k; });
  } else if (suite == "crossview") {
    with("with_cross_view", [](TrainConfig& t) { t.cross_view = true; });
    // half the targets per step without the cross term
    with("without_cross_view", [](TrainConfig& t) {
      t.cross_view = false;
      t.batch_size *= 2;
      t.epochs *= 2;
    });
  } else {
    throw ConfigError("unknown suite '" + suite + "' (components, zipf, protos, crossview)", "/suite");
  }
  return out;
}

BenchmarkData split_dataset(const Dataset& dataset, double train_fraction) {
  BenchmarkData d;
  d.num_classes = dataset.config.num_classes;
  const auto n = dataset.scenes.size();
  auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  d.train.assign(dataset.scenes.begin(), dataset.scenes.begin() + static_cast<std::ptrdiff_t>(n_train));
  d.eval.assign(dataset.scenes.begin() + static_cast<std::ptrdiff_t>(n_train), dataset.scenes.end());
  return d;
}

RunConfig benchmark_config() {
  RunConfig c;
  c.scene.appearance_variants = 4;
  c.scene.feature_noise = 0.3;
  c.num_scenes = 40;
  c.train.epochs = 60;
  c.train.optimizer.lr = 5e-3;
  c.train.ema_base = 0.99;
  c.validate();
  return c;
}

BenchmarkData make_benchmark_data(const RunConfig& run) {
  run.validate();
  return split_dataset(generate_dataset(run.scene, run.num_scenes), run.probe.train_fraction);
}

AblationRow run_variant(const Variant& variant, int seed, const BenchmarkData& data, const ProbeConfig& probe) {
  AblationRow row;
  row.variant = variant.name;
  row.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    TrainConfig cfg = variant.train;
    cfg.seed = derive_seed(variant.train.seed, {static_cast<std::uint64_t>(seed)});
    TrainState state;
    pretrain(cfg, data.train, state);
    const ParamStore& params = probe.params == "student" ? state.student : state.teacher;
    const ProbeResult r = run_probe(params, cfg.encoder, cfg.voxel_size, data.train, data.eval, data.num_classes, probe);
    row.miou = r.miou;
    row.macc = r.macc;
    row.acc = r.acc;
    row.head = r.head;
    row.common = r.common;
    row.tail = r.tail;
  } catch (const std::exception& e) {
    row.ok = false;
    row.error = e.what();
  }
  row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

int worker_threads() {
  const char* env = std::getenv("DOS_THREADS");
  if (!env) return 1;
  const int n = std::atoi(env);
  return n > 0 ? n : 1;
}

std::vector<AblationRow> run_suite(const std::vector<Variant>& variants, int seeds, const BenchmarkData& data,
                                   const ProbeConfig& probe, int threads) {
  if (seeds < 1) throw ConfigError("seeds must be >= 1", "/seeds");
  const std::size_t total = variants.size() * static_cast<std::size_t>(seeds);
  std::vector<AblationRow> rows(total);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j = next++; j < total; j = next++)
      rows[j] = run_variant(variants[j / static_cast<std::size_t>(seeds)], static_cast<int>(j % static_cast<std::size_t>(seeds)),
                            data, probe);
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(total)));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return rows;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<VariantSummary> summarize(const std::vector<AblationRow>& rows) {
  std::vector<VariantSummary> out;
  std::vector<std::string> order;
  for (const auto& r : rows)
    if (std::find(order.begin(), order.end(), r.variant) == order.end()) order.push_back(r.variant);
  for (const auto& name : order) {
    std::vector<double> miou, macc, head, common, tail;
    for (const auto& r : rows) {
      if (r.variant != name || !r.ok) continue;
      miou.push_back(r.miou);
      macc.push_back(r.macc);
      head.push_back(r.head);
      common.push_back(r.common);
      tail.push_back(r.tail);
    }
    out.push_back({name, static_cast<int>(miou.size()), median(miou), median(macc), median(head), median(common),
                   median(tail)});
  }
  return out;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  char buf[256];
  out << "variant,seed,mIoU,mAcc,tail_mIoU,head_mIoU,common_mIoU,status\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f,%.6f,", r.seed, r.miou, r.macc, r.tail, r.head, r.common);
    std::string status = r.ok ? "ok" : "error: " + r.error;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    out << r.variant << "," << buf << status << "\n";
  }
  for (const auto& s : summarize(rows)) {
    std::snprintf(buf, sizeof buf, "median,%.6f,%.6f,%.6f,%.6f,%.6f,n=%d", s.miou, s.macc, s.tail, s.head, s.common,
                  s.runs);
    out << s.variant << "," << buf << "\n";
  }
}

}  // namespace dos
