#pragma once

#include "avmoe/core/types.hpp"
#include "avmoe/data/synthetic.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <utility>

namespace avmoe::corruption {

using data::FrameSeq;

enum class ModalityDrop { none, drop_audio, drop_video };

/// Corrupted (C) and masked (M) frame indices per modality for one sequence.
/// Index lists are sorted and duplicate-free.
struct CorruptionPlan {
  int seq_len = 0;
  IndexSet audio_corrupt;
  IndexSet video_corrupt;
  IndexSet audio_mask;
  IndexSet video_mask;
  ModalityDrop modality_drop = ModalityDrop::none;

  IndexSet corrupt_union() const;
  IndexSet mask_union() const;
  /// Bounds, sortedness, and (M^a u M^v) n (C^a u C^v) = {}.
  void validate() const;
};

struct CorruptionOp {
  enum class Kind { additive_noise, zero, blur, shuffle };
  Kind kind = Kind::zero;
  double snr_db = 0.0;  ///< additive_noise
  int window = 3;       ///< blur; odd

  static CorruptionOp noise(double snr_db) { return {Kind::additive_noise, snr_db, 3}; }
  static CorruptionOp zero() { return {Kind::zero, 0.0, 3}; }
  static CorruptionOp blur(int window) { return {Kind::blur, 0.0, window}; }
  static CorruptionOp shuffle() { return {Kind::shuffle, 0.0, 3}; }
};

struct RatioRange {
  double lo = 0.0;
  double hi = 0.0;
};

/// Per modality: ratio ~ U[lo, hi], floor(ratio * T) frames split over
/// `events` disjoint contiguous chunks with uniformly random placement.
/// Audio and video are dropped with probability drop_prob each, never both.
CorruptionPlan sample_corruption_plan(int seq_len, RatioRange video_ratio, RatioRange audio_ratio,
                                      int events, double drop_prob, std::uint64_t seed);

/// Span masks (HuBERT-style start sampling), then every masked index that
/// collides with C^a u C^v is removed.
CorruptionPlan allocate_masks(CorruptionPlan plan, double audio_mask_prob, int audio_span,
                              double video_mask_prob, int video_span, std::uint64_t seed);

/// Adds alpha * noise on the indexed frames, alpha chosen so the signal to
/// added-noise energy ratio over those frames equals snr_db. Noise row j is
/// used for the j-th index.
FrameSeq corrupt_audio(const FrameSeq& frames, const FrameSeq& noise, double snr_db,
                       const IndexSet& indices);

/// Measured 10 log10(E_signal / E_added) over the indexed frames.
double measured_snr_db(const FrameSeq& clean, const FrameSeq& corrupted, const IndexSet& indices);

FrameSeq corrupt_video(const FrameSeq& frames, const CorruptionOp& op, const IndexSet& indices,
                       std::uint64_t seed);

std::pair<FrameSeq, FrameSeq> apply_modality_dropout(const FrameSeq& audio, const FrameSeq& video,
                                                     const CorruptionPlan& plan);

/// Sets masked frames to zero.
FrameSeq apply_mask(const FrameSeq& frames, const IndexSet& mask);

/// Contiguous chunks (as sorted index list) that partition `indices`.
std::vector<std::pair<int, int>> contiguous_runs(const IndexSet& indices);

enum class NoiseSource { gaussian, babble };

/// Named corruption regimes.
struct CorruptionPreset {
  std::string name;
  RatioRange video_ratio;
  RatioRange audio_ratio;
  int events = 1;
  double drop_prob = 0.0;
  double audio_snr_db = -10.0;
  /// Fraction of sequences whose audio is noised over its whole length at
  /// full_noise_snr_db instead of the chunk rule.
  double full_noise_prob = 0.0;
  double full_noise_snr_db = 0.0;
  /// Video chunk length ratio ~ Beta(2, 2) instead of U[lo, hi].
  bool beta_video_length = false;
  /// Each video chunk gets noise or blur with these odds, zeroing otherwise.
  double video_noise_prob = 0.3;
  double video_blur_prob = 0.3;
  double video_noise_snr_db = 0.0;
  int blur_window = 5;
  double audio_mask_prob = 0.0;
  int audio_mask_span = 10;
  double video_mask_prob = 0.0;
  int video_mask_span = 5;
  NoiseSource noise_source = NoiseSource::gaussian;
};

/// `clean`, `train-default`, `eval-fullnoise`, `eval-joint`.
CorruptionPreset preset(const std::string& name);
std::vector<std::string> preset_names();

struct CorruptedSample {
  FrameSeq audio;   ///< corrupted, masked, with dropout applied
  FrameSeq video;
  CorruptionPlan plan;
};

/// Applies a preset to a clean pair. `babble` draws audio noise from
/// `babble_source` frames (another utterance) when given.
CorruptedSample corrupt_pair(const data::SyntheticPair& pair, const CorruptionPreset& preset,
                             std::uint64_t seed, const FrameSeq* babble_source = nullptr);

/// Full-length audio noise at a fixed SNR with clean video.
FrameSeq noise_whole_audio(const FrameSeq& audio, double snr_db, std::uint64_t seed);

void to_json(nlohmann::json& j, const CorruptionPlan& plan);
void from_json(const nlohmann::json& j, CorruptionPlan& plan);

}  // namespace avmoe::corruption
