#pragma once

#include "dos/cloudops.hpp"
#include "dos/encoder.hpp"
#include "dos/numerics.hpp"
#include "dos/objective.hpp"
#include "dos/scenegen.hpp"
#include "dos/transport.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dos {

enum class SupervisionMode { Observable, MaskedNaive, MaskedJitter };

std::string to_string(SupervisionMode m);
SupervisionMode supervision_mode_from_string(const std::string& s);

struct TrainConfig {
  ObjectiveMode objective = ObjectiveMode::SoftmapZipf;
  SupervisionMode supervision = SupervisionMode::Observable;
  bool cross_view = true;
  int epochs = 50;
  int batch_size = 4;
  AdamWConfig optimizer{};
  double ema_base = 0.996;
  double ema_final = 1.0;
  double tau_student = 0.1;
  double tau_teacher = 0.05;
  TransportConfig transport{};
  int prototypes = 64;
  double mask_ratio = 0.7;
  double block_size = 1.0;
  double voxel_size = 0.2;
  double token_jitter = 0.1;  ///< coordinate jitter std for masked_jitter, meters
  AugmentConfig views{};
  EncoderConfig encoder{};
  std::uint64_t seed = 1;
  int checkpoint_every = 0;  ///< steps; 0 disables periodic checkpoints

  void validate() const;
};

/// Parameters of the student and its EMA teacher. Both stores hold the encoder
/// arrays plus "prototypes" (K x D, unit rows) and "mask_token" (1 x d).
struct TrainState {
  TrainConfig config;
  ParamStore student;
  ParamStore teacher;
  AdamW optimizer;
  std::int64_t step = 0;
  std::int64_t prototype_redraws = 0;

  const Mat& prototypes() const { return student.value("prototypes"); }
};

TrainState init_state(const TrainConfig& config, int feature_dim);

struct Schedule {
  double momentum = 0.0;
  double alpha = 0.0;
};

/// Cosine EMA ramp from base to final; alpha constant or linear.
Schedule schedule(std::int64_t step, std::int64_t total_steps, const TrainConfig& config);

std::int64_t steps_per_epoch(const TrainConfig& config, std::size_t num_scenes);

/// Scenes used by global step `step`.
std::vector<int> batch_indices(const TrainConfig& config, std::size_t num_scenes, std::int64_t step);

/// Called on the student's private copy of each view before its input is
/// built; lets tests alter masked points without touching the teacher's view.
using StudentViewHook = std::function<void(View& student_view, const MaskSpec& mask, int scene, int view)>;

/// Student input for one view.
struct StudentInput {
  VoxelGrid grid;
  EncoderGraph graph;
  Mat base_input;                  ///< pooled input with masked features zeroed
  std::vector<double> token_share; ///< fraction of each voxel's points carrying the mask token
  std::vector<int> supervised;     ///< student voxels that receive supervision
  std::vector<int> point_index;    ///< student grid point -> view-local index
};

/// Observable mode keeps only visible points. Masked modes keep every point,
/// replace masked features with the mask token and (jitter) perturb masked
/// coordinates; supervision then sits on fully masked voxels.
StudentInput build_student_input(const View& view, const MaskSpec& mask, SupervisionMode mode, double voxel_size,
                                 double token_jitter, std::uint64_t jitter_seed, const EncoderConfig& encoder);

Mat student_input_matrix(const StudentInput& in, const Mat& mask_token);

/// Student embeddings at the supervised (masked) voxels for a masked-token mode.
Mat masked_token_forward(const TrainState& state, const View& view, const MaskSpec& mask, SupervisionMode mode,
                         std::uint64_t jitter_seed);

/// Everything a step needs that does not depend on student parameters.
struct PreparedView {
  StudentInput input;
  ViewTargets targets;
  double achieved_mask_ratio = 0.0;
  double row_spread = 0.0;
  double usage_entropy = 0.0;
};

struct PreparedBatch {
  std::vector<PreparedView> views;  ///< two per scene, scene-major
  int cross_skipped = 0;
  double alpha = 0.0;
  double momentum = 0.0;
};

PreparedBatch prepare_batch(const TrainState& state, const std::vector<const LabeledCloud*>& scenes,
                            std::int64_t step, std::int64_t total_steps, const StudentViewHook& hook = {});

struct BatchLoss {
  double total = 0.0;  ///< mean over scenes of L_1 + L_2
  double same = 0.0;
  double cross = 0.0;
  double kl = 0.0;
  std::vector<double> per_view;  ///< L_a for each prepared view
  int zero_norm_rows = 0;
};

/// Student loss with teacher targets held fixed; writes gradients into `student`.
BatchLoss student_loss(ParamStore& student, const PreparedBatch& batch, const TrainConfig& config);

struct StepMetrics {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double loss_total = 0.0;
  double loss_same = 0.0;
  double loss_cross = 0.0;
  double kl_diag = 0.0;
  double proto_usage_entropy = 0.0;
  double row_spread = 0.0;
  double ema_m = 0.0;
  double alpha = 0.0;
  double achieved_mask_ratio = 0.0;
  int cross_skipped = 0;
};

StepMetrics train_step(TrainState& state, const std::vector<const LabeledCloud*>& scenes, std::int64_t total_steps,
                       const StudentViewHook& hook = {});

struct PretrainOptions {
  std::optional<std::filesystem::path> checkpoint_dir;
  std::optional<std::filesystem::path> metrics_path;  ///< JSONL, appended per step
  std::int64_t stop_after = -1;                       ///< stop at this global step (for split runs)
  StudentViewHook hook;
  std::function<void(const StepMetrics&)> on_step;
};

/// Runs the epoch loop from state.step to the configured total.
std::vector<StepMetrics> pretrain(TrainState& state, const std::vector<LabeledCloud>& scenes,
                                  const PretrainOptions& options = {});

std::vector<StepMetrics> pretrain(const TrainConfig& config, const std::vector<LabeledCloud>& scenes,
                                  TrainState& out_state, const PretrainOptions& options = {});

/// Finite-difference check of the student loss of one prepared step over
/// `scenes` (all of them form the batch) at the state's initialization.
GradCheckReport check_step_gradients(const TrainState& state, const std::vector<LabeledCloud>& scenes, double eps);

std::string metrics_to_json_line(const StepMetrics& m);

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace dos
