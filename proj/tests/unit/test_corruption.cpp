#include "avmoe/core/random.hpp"
#include "avmoe/corruption/corruption.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

using namespace avmoe;
using namespace avmoe::corruption;

namespace {

IndexSet range(int lo, int hi) {
  IndexSet s(static_cast<std::size_t>(hi - lo));
  std::iota(s.begin(), s.end(), lo);
  return s;
}

bool is_contiguous(const IndexSet& s) {
  for (std::size_t i = 1; i < s.size(); ++i)
    if (s[i] != s[i - 1] + 1) return false;
  return true;
}

}  // namespace

TEST(SamplePlan, RatioBoundaries) {
  const CorruptionPlan none = sample_corruption_plan(50, {0, 0}, {0, 0}, 1, 0.0, 1);
  EXPECT_TRUE(none.audio_corrupt.empty());
  EXPECT_TRUE(none.video_corrupt.empty());
  const CorruptionPlan all = sample_corruption_plan(50, {1, 1}, {1, 1}, 1, 0.0, 1);
  EXPECT_EQ(all.audio_corrupt, range(0, 50));
  EXPECT_EQ(all.video_corrupt, range(0, 50));
  const CorruptionPlan thirty = sample_corruption_plan(100, {0.3, 0.3}, {0.57, 0.57}, 1, 0.0, 9);
  EXPECT_EQ(thirty.video_corrupt.size(), 30u);
  EXPECT_EQ(thirty.audio_corrupt.size(), 57u);
}

TEST(SamplePlan, SingleEventIsOneChunkWithinRange) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const CorruptionPlan p = sample_corruption_plan(40, {0.1, 0.5}, {0.3, 0.5}, 1, 0.25, seed);
    EXPECT_TRUE(is_contiguous(p.video_corrupt));
    EXPECT_TRUE(is_contiguous(p.audio_corrupt));
    EXPECT_GE(p.video_corrupt.size(), 4u);
    EXPECT_LE(p.video_corrupt.size(), 20u);
    EXPECT_GE(p.audio_corrupt.size(), 12u);
    EXPECT_LE(p.audio_corrupt.size(), 20u);
    p.validate();
  }
}

TEST(SamplePlan, MultipleEventsGiveDisjointChunks) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const CorruptionPlan p = sample_corruption_plan(30, {0.5, 0.5}, {0.2, 0.2}, 3, 0.0, seed);
    EXPECT_EQ(p.video_corrupt.size(), 15u);
    EXPECT_EQ(std::set<int>(p.video_corrupt.begin(), p.video_corrupt.end()).size(), 15u);
    EXPECT_LE(contiguous_runs(p.video_corrupt).size(), 3u);
  }
}

TEST(SamplePlan, Errors) {
  EXPECT_THROW(sample_corruption_plan(3, {0.1, 0.2}, {0, 0}, 4, 0.0, 1), PreconditionError);
  EXPECT_THROW(sample_corruption_plan(10, {0.5, 0.2}, {0, 0}, 1, 0.0, 1), PreconditionError);
  EXPECT_THROW(sample_corruption_plan(10, {0, 0}, {0, 1.5}, 1, 0.0, 1), PreconditionError);
  EXPECT_THROW(sample_corruption_plan(10, {0, 0}, {0, 0}, 1, 1.5, 1), PreconditionError);
}

TEST(SamplePlan, DropRatesMatchProbability) {
  int audio = 0, video = 0;
  const int n = 20000;
  for (int s = 0; s < n; ++s) {
    const CorruptionPlan p = sample_corruption_plan(10, {0, 0}, {0, 0}, 1, 0.25, std::uint64_t(s));
    audio += p.modality_drop == ModalityDrop::drop_audio;
    video += p.modality_drop == ModalityDrop::drop_video;
  }
  EXPECT_NEAR(audio / double(n), 0.25, 0.01);
  EXPECT_NEAR(video / double(n), 0.25, 0.01);
}

TEST(AllocateMasks, NothingLeftToMask) {
  CorruptionPlan p;
  p.seq_len = 30;
  p.audio_corrupt = range(0, 20);
  p.video_corrupt = range(10, 30);
  const CorruptionPlan m = allocate_masks(p, 0.8, 10, 0.3, 5, 4);
  EXPECT_TRUE(m.audio_mask.empty());
  EXPECT_TRUE(m.video_mask.empty());
}

TEST(AllocateMasks, ZeroProbabilityGivesNoMask) {
  CorruptionPlan p;
  p.seq_len = 30;
  const CorruptionPlan m = allocate_masks(p, 0.0, 10, 0.0, 5, 4);
  EXPECT_TRUE(m.audio_mask.empty());
  EXPECT_TRUE(m.video_mask.empty());
}

TEST(AllocateMasks, EffectiveRatioMatchesResimulation) {
  const int T = 200;
  CorruptionPlan p;
  p.seq_len = T;
  p.audio_corrupt = range(50, 130);  // 40% of T

  // Independent re-simulation of the span rule on a different generator.
  std::mt19937 gen(12345);
  double oracle = 0.0, library = 0.0;
  const int trials = 500;
  for (int s = 0; s < trials; ++s) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int starts = static_cast<int>(std::floor(0.8 * T / 10 + u(gen)));
    std::vector<int> candidates(T - 10 + 1);
    std::iota(candidates.begin(), candidates.end(), 0);
    std::shuffle(candidates.begin(), candidates.end(), gen);
    std::set<int> hit;
    for (int i = 0; i < starts; ++i)
      for (int j = 0; j < 10; ++j) hit.insert(candidates[static_cast<std::size_t>(i)] + j);
    int kept = 0;
    for (int t : hit) kept += (t < 50 || t >= 130);
    oracle += kept / double(T);

    const CorruptionPlan m = allocate_masks(p, 0.8, 10, 0.0, 5, std::uint64_t(s));
    library += m.audio_mask.size() / double(T);
  }
  oracle /= trials;
  library /= trials;
  EXPECT_LT(library, 0.8);
  EXPECT_NEAR(library, oracle, 0.02);
}

TEST(AllocateMasks, DisjointnessOverTenThousandPlans) {
  const CorruptionPreset pr = preset("train-default");
  for (std::uint64_t s = 0; s < 10000; ++s) {
    CorruptionPlan p = sample_corruption_plan(48, pr.video_ratio, pr.audio_ratio, 1, pr.drop_prob, s);
    p = allocate_masks(p, pr.audio_mask_prob, pr.audio_mask_span, pr.video_mask_prob, pr.video_mask_span, s + 77);
    const IndexSet c = p.corrupt_union(), m = p.mask_union();
    IndexSet both;
    std::set_intersection(c.begin(), c.end(), m.begin(), m.end(), std::back_inserter(both));
    ASSERT_TRUE(both.empty()) << s;
  }
}

TEST(CorruptAudio, EmptyIndicesLeaveFramesUnchanged) {
  Rng rng(1);
  const Matrix a = rng.normal_matrix(8, 4);
  EXPECT_EQ(corrupt_audio(a, rng.normal_matrix(8, 4), -10, {}), a);
}

TEST(CorruptAudio, EqualEnergyAtZeroDbAddsNoiseUnscaled) {
  Rng rng(2);
  const Matrix a = rng.normal_matrix(6, 3);
  const Matrix noise = a.colwise().reverse();  // same energy, different frames
  const Matrix out = corrupt_audio(a, noise, 0.0, range(0, 6));
  EXPECT_LT((out - (a + noise)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(CorruptAudio, MinusTenDbScalesBySqrtTen) {
  Rng rng(3);
  const Matrix a = rng.normal_matrix(6, 3);
  const Matrix noise = a.colwise().reverse();
  const Matrix out = corrupt_audio(a, noise, -10.0, range(0, 6));
  EXPECT_LT((out - (a + std::sqrt(10.0) * noise)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(measured_snr_db(a, out, range(0, 6)), -10.0, 0.05);
}

TEST(CorruptAudio, MeasuredSnrWithinTolerance) {
  for (double snr : {-10.0, -5.0, 0.0, 5.0, 10.0})
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      const Matrix a = rng.normal_matrix(100, 8);
      const IndexSet idx = range(20, 84);
      const Matrix out = corrupt_audio(a, rng.normal_matrix(64, 8, 3.0), snr, idx);
      EXPECT_NEAR(measured_snr_db(a, out, idx), snr, 0.05);
      for (int t = 0; t < 100; ++t)
        if (t < 20 || t >= 84) ASSERT_EQ(RowVector(out.row(t)), RowVector(a.row(t)));
    }
}

TEST(CorruptAudio, Errors) {
  Rng rng(4);
  const Matrix a = rng.normal_matrix(5, 2);
  EXPECT_THROW(corrupt_audio(a, Matrix::Zero(5, 2), 0.0, {1, 2}), NumericError);
  EXPECT_THROW(corrupt_audio(a, rng.normal_matrix(1, 2), 0.0, {1, 2}), DimensionError);
  EXPECT_THROW(corrupt_audio(a, rng.normal_matrix(5, 2), 0.0, {7}), IndexError);
}

TEST(CorruptVideo, ZeroEverything) {
  Rng rng(5);
  const Matrix v = rng.normal_matrix(7, 3);
  EXPECT_EQ(corrupt_video(v, CorruptionOp::zero(), range(0, 7), 1), Matrix::Zero(7, 3));
}

TEST(CorruptVideo, BlurWindowOneIsIdentity) {
  Rng rng(6);
  const Matrix v = rng.normal_matrix(7, 3);
  EXPECT_EQ(corrupt_video(v, CorruptionOp::blur(1), range(0, 7), 1), v);
}

TEST(CorruptVideo, BlurMatchesDirectConvolution) {
  Matrix ramp(6, 2);
  for (int t = 0; t < 6; ++t) ramp.row(t) << double(t), double(t * t);
  const Matrix out = corrupt_video(ramp, CorruptionOp::blur(3), range(0, 6), 1);
  // Reflective boundary: frame -1 mirrors frame 1, frame 6 mirrors frame 4.
  auto at = [&](int t) -> RowVector {
    if (t < 0) t = -t;
    if (t > 5) t = 10 - t;
    return ramp.row(t);
  };
  for (int t = 0; t < 6; ++t) {
    const RowVector expected = (at(t - 1) + at(t) + at(t + 1)) / 3.0;
    EXPECT_LT((RowVector(out.row(t)) - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(CorruptVideo, EvenBlurWindowRejected) {
  EXPECT_THROW(corrupt_video(Matrix::Zero(3, 2), CorruptionOp::blur(4), {0}, 1), PreconditionError);
}

TEST(CorruptVideo, OnlyIndexedFramesChange) {
  Rng rng(7);
  const Matrix v = rng.normal_matrix(20, 4);
  const IndexSet idx = range(5, 12);
  for (const CorruptionOp& op : {CorruptionOp::zero(), CorruptionOp::noise(0.0), CorruptionOp::shuffle(),
                                 CorruptionOp::blur(5)}) {
    const Matrix out = corrupt_video(v, op, idx, 3);
    for (int t = 0; t < 20; ++t)
      if (t < 5 || t >= 12) ASSERT_EQ(RowVector(out.row(t)), RowVector(v.row(t)));
  }
}

TEST(CorruptVideo, ShufflePermutesIndexedFrames) {
  Rng rng(8);
  const Matrix v = rng.normal_matrix(10, 3);
  const IndexSet idx = range(2, 9);
  const Matrix out = corrupt_video(v, CorruptionOp::shuffle(), idx, 5);
  std::multiset<double> before, after;
  for (int t : idx) {
    before.insert(v(t, 0));
    after.insert(out(t, 0));
  }
  EXPECT_EQ(before, after);
  EXPECT_NE(out, v);
}

TEST(ModalityDropout, Cases) {
  Rng rng(9);
  const Matrix a = rng.normal_matrix(6, 3), v = rng.normal_matrix(6, 2);
  CorruptionPlan p;
  p.seq_len = 6;
  auto [a0, v0] = apply_modality_dropout(a, v, p);
  EXPECT_EQ(a0, a);
  EXPECT_EQ(v0, v);
  p.modality_drop = ModalityDrop::drop_audio;
  auto [a1, v1] = apply_modality_dropout(a, v, p);
  EXPECT_EQ(a1, Matrix::Zero(6, 3));
  EXPECT_EQ(v1, v);
  p.modality_drop = ModalityDrop::drop_video;
  auto [a2, v2] = apply_modality_dropout(a, v, p);
  EXPECT_EQ(a2, a);
  EXPECT_EQ(v2, Matrix::Zero(6, 2));
  p.seq_len = 5;
  EXPECT_THROW(apply_modality_dropout(a, v, p), DimensionError);
}

TEST(ContiguousRuns, SplitsAtGaps) {
  const auto runs = contiguous_runs({1, 2, 3, 7, 9, 10});
  ASSERT_EQ(runs.size(), 3u);
  EXPECT_EQ(runs[0], std::make_pair(1, 3));
  EXPECT_EQ(runs[1], std::make_pair(7, 1));
  EXPECT_EQ(runs[2], std::make_pair(9, 2));
}

TEST(Presets, KnownNames) {
  for (const std::string& name : preset_names()) EXPECT_EQ(preset(name).name, name);
  EXPECT_THROW(preset("nope"), ConfigError);
  const CorruptionPreset train = preset("train-default");
  EXPECT_DOUBLE_EQ(train.drop_prob, 0.25);
  EXPECT_DOUBLE_EQ(train.audio_mask_prob, 0.8);
  EXPECT_EQ(train.audio_mask_span, 10);
  EXPECT_DOUBLE_EQ(train.video_mask_prob, 0.3);
  EXPECT_EQ(train.video_mask_span, 5);
  EXPECT_DOUBLE_EQ(train.audio_snr_db, -10.0);
}

TEST(CorruptPair, CleanPresetIsIdentity) {
  const data::SyntheticPair pair = data::generate_pair(data::GeneratorConfig{}, 6, 3);
  const CorruptedSample s = corrupt_pair(pair, preset("clean"), 11);
  EXPECT_EQ(s.audio, pair.audio);
  EXPECT_EQ(s.video, pair.video);
}

TEST(CorruptPair, MasksAndDropoutAreApplied) {
  const data::SyntheticPair pair = data::generate_pair(data::GeneratorConfig{}, 10, 4);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const CorruptedSample s = corrupt_pair(pair, preset("train-default"), seed);
    s.plan.validate();
    for (int t : s.plan.audio_mask) EXPECT_EQ(s.audio.row(t).squaredNorm(), 0.0);
    for (int t : s.plan.video_mask) EXPECT_EQ(s.video.row(t).squaredNorm(), 0.0);
    if (s.plan.modality_drop == ModalityDrop::drop_audio) EXPECT_EQ(s.audio.squaredNorm(), 0.0);
    if (s.plan.modality_drop == ModalityDrop::drop_video) EXPECT_EQ(s.video.squaredNorm(), 0.0);
  }
}

TEST(CorruptPair, Deterministic) {
  const data::SyntheticPair pair = data::generate_pair(data::GeneratorConfig{}, 10, 4);
  const CorruptedSample a = corrupt_pair(pair, preset("eval-fullnoise"), 5);
  const CorruptedSample b = corrupt_pair(pair, preset("eval-fullnoise"), 5);
  EXPECT_EQ(a.audio, b.audio);
  EXPECT_EQ(a.video, b.video);
  EXPECT_EQ(a.plan.audio_corrupt, range(0, 40));
}

TEST(PlanJson, RoundTripAndValidation) {
  CorruptionPlan p = sample_corruption_plan(30, {0.2, 0.4}, {0.3, 0.5}, 1, 0.25, 8);
  p = allocate_masks(p, 0.8, 10, 0.3, 5, 9);
  const nlohmann::json j = p;
  const CorruptionPlan back = j.get<CorruptionPlan>();
  EXPECT_EQ(back.audio_corrupt, p.audio_corrupt);
  EXPECT_EQ(back.video_mask, p.video_mask);
  EXPECT_EQ(back.modality_drop, p.modality_drop);

  nlohmann::json bad = j;
  bad["audio_mask"] = p.audio_corrupt.empty() ? IndexSet{0} : IndexSet{p.audio_corrupt.front()};
  bad["audio_corrupt"] = IndexSet{bad["audio_mask"][0].get<int>()};
  EXPECT_THROW(bad.get<CorruptionPlan>(), PreconditionError);
}
