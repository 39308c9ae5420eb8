#include "avmoe/corruption/corruption.hpp"

#include "avmoe/core/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace avmoe::corruption {
namespace {

IndexSet set_union(const IndexSet& a, const IndexSet& b) {
  IndexSet out;
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

void check_indices(const char* op, const IndexSet& indices, Index frames) {
  for (int i : indices)
    if (i < 0 || i >= frames)
      throw IndexError(std::string(op) + ": index " + std::to_string(i) + " outside [0, " +
                       std::to_string(frames) + ")");
}

/// floor(ratio * T); the epsilon keeps e.g. 0.57 * 100 from landing on 56.
int frames_for_ratio(double ratio, int seq_len) {
  return std::min(seq_len, static_cast<int>(std::floor(ratio * seq_len + 1e-9)));
}

/// `total` frames split over min(events, total) disjoint chunks. Chunk sizes
/// differ by at most one (earlier chunks are longer); placement is uniform
/// over orderings of gaps via sorted offsets in [0, T - total].
IndexSet sample_chunks(int seq_len, int total, int events, Rng& rng) {
  IndexSet out;
  if (total <= 0 || events <= 0) return out;
  const int chunks = std::min(events, total);
  const int free = seq_len - total;
  std::vector<int> offsets(static_cast<std::size_t>(chunks));
  for (int& o : offsets) o = rng.uniform_int(0, free);
  std::sort(offsets.begin(), offsets.end());
  int consumed = 0;
  for (int c = 0; c < chunks; ++c) {
    const int len = total / chunks + (c < total % chunks ? 1 : 0);
    const int start = offsets[static_cast<std::size_t>(c)] + consumed;
    for (int i = 0; i < len; ++i) out.push_back(start + i);
    consumed += len;
  }
  return out;
}

int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

double sample_beta22(Rng& rng) {
  std::gamma_distribution<double> gamma(2.0, 1.0);
  const double x = gamma(rng.engine());
  const double y = gamma(rng.engine());
  return x / (x + y);
}

}  // namespace

IndexSet CorruptionPlan::corrupt_union() const { return set_union(audio_corrupt, video_corrupt); }
IndexSet CorruptionPlan::mask_union() const { return set_union(audio_mask, video_mask); }

void CorruptionPlan::validate() const {
  for (const IndexSet* s : {&audio_corrupt, &video_corrupt, &audio_mask, &video_mask}) {
    check_indices("CorruptionPlan", *s, seq_len);
    if (!std::is_sorted(s->begin(), s->end()) || std::adjacent_find(s->begin(), s->end()) != s->end())
      throw PreconditionError("CorruptionPlan: index lists must be sorted and unique");
  }
  const IndexSet m = mask_union();
  const IndexSet c = corrupt_union();
  IndexSet both;
  std::set_intersection(m.begin(), m.end(), c.begin(), c.end(), std::back_inserter(both));
  if (!both.empty())
    throw PreconditionError("CorruptionPlan: frame " + std::to_string(both.front()) +
                            " is both masked and corrupted");
}

CorruptionPlan sample_corruption_plan(int seq_len, RatioRange video_ratio, RatioRange audio_ratio,
                                      int events, double drop_prob, std::uint64_t seed) {
  for (const RatioRange& r : {video_ratio, audio_ratio})
    if (!(0.0 <= r.lo && r.lo <= r.hi && r.hi <= 1.0))
      throw PreconditionError("sample_corruption_plan: ratio range must satisfy 0 <= lo <= hi <= 1");
  if (events < 0) throw PreconditionError("sample_corruption_plan: events must be >= 0");
  if (!(drop_prob >= 0.0 && drop_prob <= 1.0))
    throw PreconditionError("sample_corruption_plan: drop_prob must lie in [0, 1]");
  if (seq_len < 1) throw PreconditionError("sample_corruption_plan: empty sequence");
  if (events > seq_len)
    throw PreconditionError("sample_corruption_plan: " + std::to_string(events) +
                            " events cannot fit in " + std::to_string(seq_len) + " frames");

  Rng rng(seed);
  CorruptionPlan plan;
  plan.seq_len = seq_len;
  const double v_ratio = video_ratio.lo == video_ratio.hi ? video_ratio.lo : rng.uniform(video_ratio.lo, video_ratio.hi);
  plan.video_corrupt = sample_chunks(seq_len, frames_for_ratio(v_ratio, seq_len), events, rng);
  const double a_ratio = audio_ratio.lo == audio_ratio.hi ? audio_ratio.lo : rng.uniform(audio_ratio.lo, audio_ratio.hi);
  plan.audio_corrupt = sample_chunks(seq_len, frames_for_ratio(a_ratio, seq_len), events, rng);

  // Mutually exclusive: P(drop audio) = p, P(drop video) = min(p, 1 - p).
  const double u = rng.uniform();
  if (u < drop_prob) {
    plan.modality_drop = ModalityDrop::drop_audio;
  } else if (u < std::min(1.0, 2.0 * drop_prob)) {
    plan.modality_drop = ModalityDrop::drop_video;
  }
  return plan;
}

CorruptionPlan allocate_masks(CorruptionPlan plan, double audio_mask_prob, int audio_span,
                              double video_mask_prob, int video_span, std::uint64_t seed) {
  if (audio_span < 1 || video_span < 1) throw PreconditionError("allocate_masks: spans must be >= 1");
  for (double p : {audio_mask_prob, video_mask_prob})
    if (!(p >= 0.0 && p <= 1.0)) throw PreconditionError("allocate_masks: probabilities must lie in [0, 1]");

  Rng rng(seed);
  const int T = plan.seq_len;
  const IndexSet corrupted = plan.corrupt_union();
  std::vector<char> blocked(static_cast<std::size_t>(T), 0);
  for (int i : corrupted) blocked[static_cast<std::size_t>(i)] = 1;

  auto sample = [&](double prob, int span) {
    IndexSet out;
    if (prob <= 0.0 || T == 0) return out;
    span = std::min(span, T);
    const int candidates = T - span + 1;
    int starts = static_cast<int>(std::floor(prob * T / span + rng.uniform()));
    starts = std::min(starts, candidates);
    std::vector<int> pool(static_cast<std::size_t>(candidates));
    std::iota(pool.begin(), pool.end(), 0);
    // Partial Fisher-Yates: first `starts` entries are a uniform sample without replacement.
    for (int i = 0; i < starts; ++i) std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(rng.uniform_int(i, candidates - 1))]);
    std::vector<char> hit(static_cast<std::size_t>(T), 0);
    for (int i = 0; i < starts; ++i)
      for (int j = 0; j < span; ++j) hit[static_cast<std::size_t>(pool[static_cast<std::size_t>(i)] + j)] = 1;
    for (int t = 0; t < T; ++t)
      if (hit[static_cast<std::size_t>(t)] && !blocked[static_cast<std::size_t>(t)]) out.push_back(t);
    return out;
  };
  plan.audio_mask = sample(audio_mask_prob, audio_span);
  plan.video_mask = sample(video_mask_prob, video_span);
  return plan;
}

FrameSeq corrupt_audio(const FrameSeq& frames, const FrameSeq& noise, double snr_db,
                       const IndexSet& indices) {
  check_indices("corrupt_audio", indices, frames.rows());
  if (indices.empty()) return frames;
  if (noise.rows() < static_cast<Index>(indices.size()) || noise.cols() != frames.cols())
    throw DimensionError("corrupt_audio: noise " + shape_string(noise) + " cannot cover " +
                         std::to_string(indices.size()) + " frames of width " + std::to_string(frames.cols()));
  double signal = 0.0, noise_energy = 0.0;
  for (std::size_t j = 0; j < indices.size(); ++j) {
    signal += frames.row(indices[j]).squaredNorm();
    noise_energy += noise.row(static_cast<Index>(j)).squaredNorm();
  }
  if (!(noise_energy > 0.0)) throw NumericError("corrupt_audio: noise has zero energy over the span");
  // Both energies are means over the same element count, which cancels.
  const double alpha = std::sqrt(signal / (noise_energy * std::pow(10.0, snr_db / 10.0)));
  FrameSeq out = frames;
  for (std::size_t j = 0; j < indices.size(); ++j) out.row(indices[j]) += alpha * noise.row(static_cast<Index>(j));
  return out;
}

double measured_snr_db(const FrameSeq& clean, const FrameSeq& corrupted, const IndexSet& indices) {
  double signal = 0.0, added = 0.0;
  for (int i : indices) {
    signal += clean.row(i).squaredNorm();
    added += (corrupted.row(i) - clean.row(i)).squaredNorm();
  }
  return 10.0 * std::log10(signal / added);
}

FrameSeq corrupt_video(const FrameSeq& frames, const CorruptionOp& op, const IndexSet& indices,
                       std::uint64_t seed) {
  if (op.kind == CorruptionOp::Kind::blur && (op.window < 1 || op.window % 2 == 0))
    throw PreconditionError("corrupt_video: blur window must be odd and >= 1, got " + std::to_string(op.window));
  check_indices("corrupt_video", indices, frames.rows());
  FrameSeq out = frames;
  if (indices.empty()) return out;
  Rng rng(seed);
  switch (op.kind) {
    case CorruptionOp::Kind::zero:
      for (int i : indices) out.row(i).setZero();
      break;
    case CorruptionOp::Kind::additive_noise: {
      const Matrix noise = rng.normal_matrix(static_cast<Index>(indices.size()), frames.cols());
      out = corrupt_audio(frames, noise, op.snr_db, indices);
      break;
    }
    case CorruptionOp::Kind::blur: {
      const int half = op.window / 2;
      const int n = static_cast<int>(frames.rows());
      for (int i : indices) {
        RowVector acc = RowVector::Zero(frames.cols());
        for (int o = -half; o <= half; ++o) acc += frames.row(reflect(i + o, n));
        out.row(i) = acc / double(op.window);
      }
      break;
    }
    case CorruptionOp::Kind::shuffle: {
      IndexSet perm = indices;
      std::shuffle(perm.begin(), perm.end(), rng.engine());
      for (std::size_t j = 0; j < indices.size(); ++j) out.row(indices[j]) = frames.row(perm[j]);
      break;
    }
  }
  return out;
}

std::pair<FrameSeq, FrameSeq> apply_modality_dropout(const FrameSeq& audio, const FrameSeq& video,
                                                     const CorruptionPlan& plan) {
  if (audio.rows() != plan.seq_len || video.rows() != plan.seq_len)
    throw DimensionError("apply_modality_dropout: plan covers " + std::to_string(plan.seq_len) +
                         " frames, got audio " + shape_string(audio) + ", video " + shape_string(video));
  switch (plan.modality_drop) {
    case ModalityDrop::drop_audio:
      return {FrameSeq::Zero(audio.rows(), audio.cols()), video};
    case ModalityDrop::drop_video:
      return {audio, FrameSeq::Zero(video.rows(), video.cols())};
    case ModalityDrop::none:
      break;
  }
  return {audio, video};
}

FrameSeq apply_mask(const FrameSeq& frames, const IndexSet& mask) {
  check_indices("apply_mask", mask, frames.rows());
  FrameSeq out = frames;
  for (int i : mask) out.row(i).setZero();
  return out;
}

std::vector<std::pair<int, int>> contiguous_runs(const IndexSet& indices) {
  std::vector<std::pair<int, int>> runs;
  for (std::size_t i = 0; i < indices.size();) {
    std::size_t j = i + 1;
    while (j < indices.size() && indices[j] == indices[j - 1] + 1) ++j;
    runs.emplace_back(indices[i], indices[j - 1] - indices[i] + 1);
    i = j;
  }
  return runs;
}

CorruptionPreset preset(const std::string& name) {
  CorruptionPreset p;
  p.name = name;
  if (name == "clean") {
    p.events = 0;
    p.video_noise_prob = p.video_blur_prob = 0.0;
  } else if (name == "train-default") {
    p.video_ratio = {0.1, 0.5};
    p.audio_ratio = {0.3, 0.5};
    p.drop_prob = 0.25;
    p.audio_snr_db = -10.0;
    p.full_noise_prob = 0.25;
    p.full_noise_snr_db = 0.0;
    p.audio_mask_prob = 0.8;
    p.video_mask_prob = 0.3;
  } else if (name == "eval-fullnoise") {
    p.audio_ratio = {1.0, 1.0};
    p.beta_video_length = true;
    p.audio_snr_db = 0.0;
  } else if (name == "eval-joint") {
    p.video_ratio = {0.1, 0.5};
    p.audio_ratio = {0.3, 0.5};
    p.audio_snr_db = -10.0;
  } else {
    throw ConfigError("unknown corruption preset '" + name + "'");
  }
  return p;
}

std::vector<std::string> preset_names() { return {"clean", "train-default", "eval-fullnoise", "eval-joint"}; }

FrameSeq noise_whole_audio(const FrameSeq& audio, double snr_db, std::uint64_t seed) {
  Rng rng(seed);
  IndexSet all(static_cast<std::size_t>(audio.rows()));
  std::iota(all.begin(), all.end(), 0);
  return corrupt_audio(audio, rng.normal_matrix(audio.rows(), audio.cols()), snr_db, all);
}

CorruptedSample corrupt_pair(const data::SyntheticPair& pair, const CorruptionPreset& p,
                             std::uint64_t seed, const FrameSeq* babble_source) {
  const int T = static_cast<int>(pair.frames());
  Rng rng(seed);
  RatioRange video_ratio = p.video_ratio;
  if (p.beta_video_length) {
    const double r = sample_beta22(rng);
    video_ratio = {r, r};
  }
  CorruptionPlan plan = sample_corruption_plan(T, video_ratio, p.audio_ratio, std::min(p.events, T),
                                               p.drop_prob, rng.engine()());
  plan = allocate_masks(std::move(plan), p.audio_mask_prob, p.audio_mask_span, p.video_mask_prob,
                        p.video_mask_span, rng.engine()());

  auto make_noise = [&](Index rows) -> Matrix {
    if (p.noise_source == NoiseSource::babble && babble_source != nullptr) {
      Matrix n(rows, pair.audio.cols());
      for (Index r = 0; r < rows; ++r) n.row(r) = babble_source->row(r % babble_source->rows());
      return n;
    }
    return rng.normal_matrix(rows, pair.audio.cols());
  };

  FrameSeq audio = pair.audio;
  // whole-sequence noise is not recorded in C^a
  if (p.full_noise_prob > 0.0 && rng.bernoulli(p.full_noise_prob)) {
    IndexSet all(static_cast<std::size_t>(T));
    std::iota(all.begin(), all.end(), 0);
    audio = corrupt_audio(audio, make_noise(T), p.full_noise_snr_db, all);
  } else if (!plan.audio_corrupt.empty()) {
    audio = corrupt_audio(audio, make_noise(static_cast<Index>(plan.audio_corrupt.size())), p.audio_snr_db,
                          plan.audio_corrupt);
  }

  FrameSeq video = pair.video;
  for (const auto& [start, len] : contiguous_runs(plan.video_corrupt)) {
    IndexSet run(static_cast<std::size_t>(len));
    std::iota(run.begin(), run.end(), start);
    const double u = rng.uniform();
    CorruptionOp op = CorruptionOp::zero();
    if (u < p.video_noise_prob) {
      op = CorruptionOp::noise(p.video_noise_snr_db);
    } else if (u < p.video_noise_prob + p.video_blur_prob) {
      op = CorruptionOp::blur(p.blur_window);
    }
    video = corrupt_video(video, op, run, rng.engine()());
  }

  audio = apply_mask(audio, plan.audio_mask);
  video = apply_mask(video, plan.video_mask);
  auto [a, v] = apply_modality_dropout(audio, video, plan);
  return {std::move(a), std::move(v), std::move(plan)};
}

void to_json(nlohmann::json& j, const CorruptionPlan& plan) {
  const char* drop = plan.modality_drop == ModalityDrop::drop_audio   ? "drop_audio"
                     : plan.modality_drop == ModalityDrop::drop_video ? "drop_video"
                                                                      : "none";
  j = nlohmann::json{{"seq_len", plan.seq_len},           {"audio_corrupt", plan.audio_corrupt},
                     {"video_corrupt", plan.video_corrupt}, {"audio_mask", plan.audio_mask},
                     {"video_mask", plan.video_mask},       {"modality_drop", drop}};
}

void from_json(const nlohmann::json& j, CorruptionPlan& plan) {
  plan.seq_len = j.at("seq_len").get<int>();
  plan.audio_corrupt = j.at("audio_corrupt").get<IndexSet>();
  plan.video_corrupt = j.at("video_corrupt").get<IndexSet>();
  plan.audio_mask = j.at("audio_mask").get<IndexSet>();
  plan.video_mask = j.at("video_mask").get<IndexSet>();
  const std::string drop = j.at("modality_drop").get<std::string>();
  if (drop == "none") {
    plan.modality_drop = ModalityDrop::none;
  } else if (drop == "drop_audio") {
    plan.modality_drop = ModalityDrop::drop_audio;
  } else if (drop == "drop_video") {
    plan.modality_drop = ModalityDrop::drop_video;
  } else {
    throw ParseError("unknown modality_drop '" + drop + "'");
  }
  plan.validate();
}

}  // namespace avmoe::corruption
