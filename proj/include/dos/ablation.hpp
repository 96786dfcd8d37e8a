#pragma once

#include "dos/config.hpp"
#include "dos/probe.hpp"
#include "dos/trainer.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace dos {

struct Variant {
  std::string name;
  TrainConfig train;
};

/// Configuration grid for a named suite (components, zipf, protos, crossview),
/// derived from `base`. Throws ConfigError for an unknown suite.
std::vector<Variant> suite_variants(const std::string& suite, const TrainConfig& base);

/// Zipf exponents swept by the "zipf" suite.
std::vector<double> zipf_grid();

/// Scenes split by index: the first train_fraction for pretraining and probe
/// fitting, the rest for evaluation.
struct BenchmarkData {
  std::vector<LabeledCloud> train;
  std::vector<LabeledCloud> eval;
  int num_classes = 0;
};

/// The default synthetic benchmark used by the ablation CLI and acceptance runs.
RunConfig benchmark_config();

BenchmarkData make_benchmark_data(const RunConfig& run);
BenchmarkData split_dataset(const Dataset& dataset, double train_fraction);

struct AblationRow {
  std::string variant;
  int seed = 0;
  bool ok = true;
  std::string error;
  double miou = 0.0, macc = 0.0, acc = 0.0;
  double head = 0.0, common = 0.0, tail = 0.0;
  double seconds = 0.0;
};

/// Pretrain one variant with training seed `seed` and probe it.
AblationRow run_variant(const Variant& variant, int seed, const BenchmarkData& data, const ProbeConfig& probe);

/// Runs every (variant, seed) pair; failures are recorded per row. Up to
/// `threads` rows run concurrently; output order is variant-major regardless.
std::vector<AblationRow> run_suite(const std::vector<Variant>& variants, int seeds, const BenchmarkData& data,
                                   const ProbeConfig& probe, int threads);

/// Worker cap from DOS_THREADS (default 1).
int worker_threads();

struct VariantSummary {
  std::string variant;
  int runs = 0;
  double miou = 0.0, macc = 0.0, head = 0.0, common = 0.0, tail = 0.0;  ///< medians over successful rows
};

std::vector<VariantSummary> summarize(const std::vector<AblationRow>& rows);

double median(std::vector<double> v);

/// Rows followed by median summary rows (seed column "median").
void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

}  // namespace dos
