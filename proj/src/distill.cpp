#include "avmoe/distill/distill.hpp"

#include "avmoe/core/kernels.hpp"
#include "avmoe/core/ops.hpp"

#include <algorithm>
#include <cmath>

namespace avmoe::distill {

TeacherState make_teacher(const ParameterStore& student, double eta_start, double eta_end, long total_steps,
                          const std::string& prefix) {
  if (!(eta_start >= 0.0 && eta_start <= eta_end && eta_end <= 1.0))
    throw ConfigError("teacher: need 0 <= eta_start <= eta_end <= 1");
  if (total_steps < 1) throw ConfigError("teacher: total_steps must be positive");
  TeacherState t;
  for (const auto& [name, p] : student)
    if (name.compare(0, prefix.size(), prefix) == 0) t.params.add(name, p.value);
  if (t.params.size() == 0) throw ConfigError("teacher: no student parameter starts with '" + prefix + "'");
  t.eta_start = eta_start;
  t.eta_end = eta_end;
  t.total_steps = total_steps;
  return t;
}

double eta_schedule(const TeacherState& s) {
  if (s.current_step < 0 || s.current_step > s.total_steps)
    throw PreconditionError("eta_schedule: step " + std::to_string(s.current_step) + " outside [0, " +
                            std::to_string(s.total_steps) + "]");
  const double frac = double(s.current_step) / double(s.total_steps);
  return std::clamp(s.eta_start + (s.eta_end - s.eta_start) * frac, s.eta_start, s.eta_end);
}

void ema_update(TeacherState& teacher, const ParameterStore& student, double eta) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw PreconditionError("ema_update: eta must lie in [0, 1]");
  for (auto& [name, p] : teacher.params) {
    const Matrix& s = student.at(name).value;
    if (s.rows() != p.value.rows() || s.cols() != p.value.cols())
      throw DimensionError("ema_update: " + name + " teacher " + shape_string(p.value) + " vs student " +
                           shape_string(s));
    if (eta == 1.0) continue;
    if (eta == 0.0)
      p.value = s;
    else
      p.value = eta * p.value + (1.0 - eta) * s;
  }
}

const char* target_norm_name(TargetNorm n) {
  switch (n) {
    case TargetNorm::none: return "none";
    case TargetNorm::frame: return "frame";
    case TargetNorm::time: return "time";
  }
  return "?";
}

TargetNorm parse_target_norm(const std::string& name) {
  for (TargetNorm n : {TargetNorm::none, TargetNorm::frame, TargetNorm::time})
    if (name == target_norm_name(n)) return n;
  throw ConfigError("unknown target norm '" + name + "' (none, frame, time)");
}

Matrix normalize_targets(const Matrix& features, Index seq_frames, TargetNorm norm) {
  if (norm == TargetNorm::none) return features;
  if (norm == TargetNorm::frame) return kernels::standardize_rows(features, 1e-5);
  if (seq_frames < 1 || features.rows() % seq_frames != 0)
    throw DimensionError("normalize_targets: " + std::to_string(features.rows()) + " rows are not whole sequences of " +
                         std::to_string(seq_frames));
  Matrix out(features.rows(), features.cols());
  for (Index r0 = 0; r0 < features.rows(); r0 += seq_frames)
    out.middleRows(r0, seq_frames) =
        kernels::standardize_rows(features.middleRows(r0, seq_frames).transpose(), 1e-5).transpose();
  return out;
}

Matrix average_top_blocks(const std::vector<Matrix>& blocks, int topk) {
  if (topk < 1) throw PreconditionError("teacher targets: topk_blocks must be positive");
  if (topk > static_cast<int>(blocks.size()))
    throw PreconditionError("teacher targets: topk_blocks = " + std::to_string(topk) + " exceeds " +
                            std::to_string(blocks.size()) + " blocks");
  Matrix sum = blocks.back();
  for (int i = 2; i <= topk; ++i) sum += blocks[blocks.size() - std::size_t(i)];
  if (topk > 1) sum /= double(topk);
  return sum;
}

DistillTargets teacher_targets(const model::ModelConfig& cfg, ParameterStore& teacher, const Matrix& audio,
                               const Matrix& video, Index seq_frames, int topk_blocks, TargetMode mode,
                               TargetNorm norm) {
  if (topk_blocks < 1) throw PreconditionError("teacher targets: topk_blocks must be positive");
  Tape tape(false);
  const Matrix a = mode == TargetMode::video_only ? Matrix(Matrix::Zero(audio.rows(), audio.cols())) : audio;
  const Matrix v = mode == TargetMode::audio_only ? Matrix(Matrix::Zero(video.rows(), video.cols())) : video;
  const model::EncoderOutput enc = model::encode(tape, cfg, teacher, a, v, seq_frames);
  std::vector<Matrix> blocks;
  for (Var b : enc.blocks) blocks.push_back(b.value());
  DistillTargets t;
  t.features = average_top_blocks(blocks, topk_blocks);
  t.features = normalize_targets(t.features, seq_frames, norm);
  return t;
}

Var masked_prediction_loss(Var student, const Matrix& targets, const IndexSet& rows) {
  if (student.rows() != targets.rows() || student.cols() != targets.cols())
    throw DimensionError("masked_prediction_loss: student " + shape_string(student.value()) + " vs targets " +
                         shape_string(targets));
  if (rows.empty()) return student.tape().constant(Matrix::Zero(1, 1));
  Matrix picked(static_cast<Index>(rows.size()), targets.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= targets.rows())
      throw IndexError("masked_prediction_loss: row " + std::to_string(rows[i]) + " outside " +
                       std::to_string(targets.rows()) + " frames");
    picked.row(static_cast<Index>(i)) = targets.row(rows[i]);
  }
  return ops::mse(ops::gather_rows(student, rows), picked);
}

VariantSpec variant_spec(TaskVariant v) {
  switch (v) {
    case TaskVariant::avcp: return {InputView::av, TargetMode::av, IndexChoice::corrupt_union};
    case TaskVariant::macp: return {InputView::av, TargetMode::audio_only, IndexChoice::video_corrupt};
    case TaskVariant::mvcp: return {InputView::av, TargetMode::video_only, IndexChoice::audio_corrupt};
    case TaskVariant::acp: return {InputView::video_only, TargetMode::audio_only, IndexChoice::video_corrupt};
    case TaskVariant::vcp: return {InputView::audio_only, TargetMode::video_only, IndexChoice::audio_corrupt};
    case TaskVariant::acp_within:
      return {InputView::audio_only, TargetMode::audio_only, IndexChoice::audio_corrupt};
    case TaskVariant::vcp_within:
      return {InputView::video_only, TargetMode::video_only, IndexChoice::video_corrupt};
  }
  throw ConfigError("unknown corrupted prediction variant");
}

const char* variant_name(TaskVariant v) {
  switch (v) {
    case TaskVariant::avcp: return "avcp";
    case TaskVariant::macp: return "macp";
    case TaskVariant::mvcp: return "mvcp";
    case TaskVariant::acp: return "acp";
    case TaskVariant::vcp: return "vcp";
    case TaskVariant::acp_within: return "acp_within";
    case TaskVariant::vcp_within: return "vcp_within";
  }
  return "?";
}

TaskVariant parse_variant(const std::string& name) {
  for (TaskVariant v : {TaskVariant::avcp, TaskVariant::macp, TaskVariant::mvcp, TaskVariant::acp, TaskVariant::vcp,
                        TaskVariant::acp_within, TaskVariant::vcp_within})
    if (name == variant_name(v)) return v;
  throw ConfigError("unknown corrupted prediction variant '" + name + "'");
}

IndexSet variant_indices(TaskVariant v, const CorruptionPlan& plan) {
  switch (variant_spec(v).indices) {
    case IndexChoice::corrupt_union: return plan.corrupt_union();
    case IndexChoice::audio_corrupt: return plan.audio_corrupt;
    case IndexChoice::video_corrupt: return plan.video_corrupt;
  }
  return {};
}

std::string head_prefix(const std::string& task) { return "head." + task + "."; }

void init_heads(ParameterStore& store, int d, const std::vector<std::string>& tasks, int clusters, Rng& rng) {
  for (const std::string& t : tasks) {
    store.add(head_prefix(t) + "w", Matrix::Identity(d, d));
    store.add(head_prefix(t) + "b", Matrix::Zero(1, d));
  }
  if (clusters > 0) {
    store.add(head_prefix("mlm") + "w", rng.normal_matrix(d, clusters, 1.0 / std::sqrt(double(d))));
    store.add(head_prefix("mlm") + "b", Matrix::Zero(1, clusters));
  }
}

Var apply_head(Tape& tape, ParameterStore& store, const std::string& task, Var features) {
  const std::string p = head_prefix(task);
  return ops::add_row(ops::matmul(features, tape.parameter(store.at(p + "w"))), tape.parameter(store.at(p + "b")));
}

Var corrupted_prediction_loss(Tape& tape, TaskVariant variant, const model::ModelConfig& cfg,
                              ParameterStore& student, ParameterStore& teacher, const FrameSeq& audio,
                              const FrameSeq& audio_corrupted, const FrameSeq& video,
                              const FrameSeq& video_corrupted, const CorruptionPlan& plan,
                              const DistillOptions& options) {
  const VariantSpec spec = variant_spec(variant);
  if (plan.seq_len != audio.rows() || audio.rows() != video.rows() || audio_corrupted.rows() != audio.rows() ||
      video_corrupted.rows() != video.rows())
    throw DimensionError("corrupted_prediction_loss: plan covers " + std::to_string(plan.seq_len) +
                         " frames, sequences have " + std::to_string(audio.rows()));
  plan.validate();
  const IndexSet rows = variant_indices(variant, plan);
  if (rows.empty()) return tape.constant(Matrix::Zero(1, 1));
  const Matrix a = spec.input == InputView::video_only ? Matrix(Matrix::Zero(audio.rows(), audio.cols()))
                                                        : audio_corrupted;
  const Matrix v = spec.input == InputView::audio_only ? Matrix(Matrix::Zero(video.rows(), video.cols()))
                                                        : video_corrupted;
  Var feats = model::encode(tape, cfg, student, a, v, audio.rows()).features;
  if (options.use_heads) feats = apply_head(tape, student, variant_name(variant), feats);
  const DistillTargets t = teacher_targets(cfg, teacher, audio, video, audio.rows(), options.topk_blocks,
                                           spec.target, options.target_norm);
  return masked_prediction_loss(feats, t.features, rows);
}

std::vector<int> assign_clusters(const Matrix& features, const Matrix& centroids) {
  if (features.cols() != centroids.cols())
    throw DimensionError("assign_clusters: features " + shape_string(features) + " vs centroids " +
                         shape_string(centroids));
  return data::nearest_centroid(features, centroids);
}

Var mlm_loss(Tape& tape, ParameterStore& store, Var student_features, const Matrix& centroids,
             const Matrix& teacher_features, const IndexSet& rows) {
  if (centroids.rows() < 2) throw PreconditionError("mlm_loss: need at least 2 centroids");
  if (rows.empty()) return tape.constant(Matrix::Zero(1, 1));
  Matrix picked(static_cast<Index>(rows.size()), teacher_features.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) picked.row(static_cast<Index>(i)) = teacher_features.row(rows[i]);
  const std::vector<int> targets = assign_clusters(picked, centroids);
  Var logits = apply_head(tape, store, "mlm", ops::gather_rows(student_features, rows));
  return ops::cross_entropy(logits, targets);
}

void TaskWeights::validate() const {
  for (double w : {acp, vcp, mask, mlm})
    if (!(w >= 0.0 && std::isfinite(w))) throw ConfigError("task weights must be finite and nonnegative");
}

double cav2vec_total_loss(const TaskLosses& l, const TaskWeights& w) {
  w.validate();
  for (double v : {l.acp, l.vcp, l.mask, l.mlm})
    if (!std::isfinite(v)) throw NumericError("cav2vec_total_loss: non-finite component");
  return w.acp * l.acp + w.vcp * l.vcp + w.mask * l.mask + w.mlm * l.mlm;
}

Var cav2vec_total_loss(Var acp, Var vcp, Var mask, Var mlm, const TaskWeights& w) {
  w.validate();
  Var total = ops::scale(acp, w.acp);
  total = ops::add(total, ops::scale(vcp, w.vcp));
  total = ops::add(total, ops::scale(mask, w.mask));
  return ops::add(total, ops::scale(mlm, w.mlm));
}

}  // namespace avmoe::distill
