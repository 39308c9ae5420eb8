#pragma once

#include "avmoe/corruption/corruption.hpp"
#include "avmoe/model/model.hpp"

#include <string>
#include <vector>

namespace avmoe::distill {

using corruption::CorruptionPlan;
using data::FrameSeq;

/// EMA copy of the student encoder.
struct TeacherState {
  ParameterStore params;
  double eta_start = 0.99;
  double eta_end = 0.999;
  long total_steps = 1;
  long current_step = 0;
};

/// Snapshot of every student parameter whose name starts with `prefix`.
TeacherState make_teacher(const ParameterStore& student, double eta_start, double eta_end, long total_steps,
                          const std::string& prefix = "enc");

/// Linear ramp from eta_start to eta_end over total_steps.
double eta_schedule(const TeacherState& state);

/// teacher <- eta * teacher + (1 - eta) * student for every teacher parameter.
void ema_update(TeacherState& teacher, const ParameterStore& student, double eta);

enum class TargetMode { av, audio_only, video_only };

/// none; frame: each frame over features; time: each feature over the frames of its sequence.
enum class TargetNorm { none, frame, time };
const char* target_norm_name(TargetNorm n);
TargetNorm parse_target_norm(const std::string& name);
Matrix normalize_targets(const Matrix& features, Index seq_frames, TargetNorm norm);

struct DistillTargets {
  Matrix features;           ///< one row per frame
  std::vector<int> cluster;  ///< nearest centroid per frame, empty unless requested
};

/// Mean of the last `topk` matrices.
Matrix average_top_blocks(const std::vector<Matrix>& blocks, int topk);

/// Runs the teacher encoder without recording gradients on clean inputs,
/// zeroing the absent modality in the unimodal modes.
DistillTargets teacher_targets(const model::ModelConfig& cfg, ParameterStore& teacher, const Matrix& audio,
                               const Matrix& video, Index seq_frames, int topk_blocks, TargetMode mode,
                               TargetNorm norm = TargetNorm::time);

/// Mean squared error over the listed rows; 0 when `rows` is empty.
Var masked_prediction_loss(Var student, const Matrix& targets, const IndexSet& rows);

enum class TaskVariant { avcp, macp, mvcp, acp, vcp, acp_within, vcp_within };

enum class InputView { av, audio_only, video_only };
enum class IndexChoice { corrupt_union, audio_corrupt, video_corrupt };

struct VariantSpec {
  InputView input;
  TargetMode target;
  IndexChoice indices;
};

VariantSpec variant_spec(TaskVariant v);
const char* variant_name(TaskVariant v);
TaskVariant parse_variant(const std::string& name);
IndexSet variant_indices(TaskVariant v, const CorruptionPlan& plan);
/// Head parameter prefix of a task, e.g. "head.acp.".
std::string head_prefix(const std::string& task);

/// Identity-initialized d -> d regression heads plus a d -> clusters MLM head.
void init_heads(ParameterStore& store, int d, const std::vector<std::string>& tasks, int clusters, Rng& rng);

/// Applies a task head to stacked student features.
Var apply_head(Tape& tape, ParameterStore& store, const std::string& task, Var features);

struct DistillOptions {
  int topk_blocks = 1;
  TargetNorm target_norm = TargetNorm::time;
  bool use_heads = true;
};

/// Single-sequence form: student input per the variant's view of the
/// corrupted frames, teacher target per its target mode on the clean frames,
/// error over the variant's index set.
Var corrupted_prediction_loss(Tape& tape, TaskVariant variant, const model::ModelConfig& cfg,
                              ParameterStore& student, ParameterStore& teacher, const FrameSeq& audio,
                              const FrameSeq& audio_corrupted, const FrameSeq& video,
                              const FrameSeq& video_corrupted, const CorruptionPlan& plan,
                              const DistillOptions& options = {});

/// Nearest centroid per row by squared distance, lowest id on ties.
std::vector<int> assign_clusters(const Matrix& features, const Matrix& centroids);

/// Cross-entropy of the MLM head on the listed rows against the nearest
/// centroid of the teacher feature; 0 when `rows` is empty.
Var mlm_loss(Tape& tape, ParameterStore& store, Var student_features, const Matrix& centroids,
             const Matrix& teacher_features, const IndexSet& rows);

struct TaskWeights {
  double acp = 1.0;
  double vcp = 1.0;
  double mask = 1.0;
  double mlm = 2.0;

  void validate() const;
};

struct TaskLosses {
  double acp = 0.0;
  double vcp = 0.0;
  double mask = 0.0;
  double mlm = 0.0;
};

double cav2vec_total_loss(const TaskLosses& losses, const TaskWeights& weights);
Var cav2vec_total_loss(Var acp, Var vcp, Var mask, Var mlm, const TaskWeights& weights);

}  // namespace avmoe::distill
