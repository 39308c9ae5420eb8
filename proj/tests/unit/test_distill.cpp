#include "avmoe/core/ops.hpp"
#include "avmoe/distill/distill.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace avmoe;
using namespace avmoe::distill;

namespace {

model::ModelConfig tiny() {
  model::ModelConfig c;
  c.audio_dim = 4;
  c.video_dim = 3;
  c.d = 6;
  c.h = 8;
  c.vocab = 4;
  c.frames_per_token = 2;
  return c;
}

ParameterStore student(const model::ModelConfig& c, std::uint64_t seed = 1) {
  ParameterStore s;
  Rng rng(seed);
  model::init_model(s, c, rng);
  init_heads(s, c.d, {"mask", "avcp", "macp", "mvcp", "acp", "vcp", "acp_within", "vcp_within"}, 8, rng);
  return s;
}

CorruptionPlan plan8() {
  CorruptionPlan p;
  p.seq_len = 8;
  p.audio_corrupt = {1, 2};
  p.video_corrupt = {5, 6};
  p.audio_mask = {4};
  p.video_mask = {0};
  return p;
}

double mse_rows(const Matrix& a, const Matrix& b, const IndexSet& rows) {
  double s = 0;
  for (int r : rows)
    for (Index c = 0; c < a.cols(); ++c) s += (a(r, c) - b(r, c)) * (a(r, c) - b(r, c));
  return s / double(rows.size() * std::size_t(a.cols()));
}

}  // namespace

TEST(Ema, Endpoints) {
  ParameterStore st;
  st.add("enc.w", Matrix::Constant(2, 2, 0.0));
  TeacherState t;
  t.params.add("enc.w", Matrix::Constant(2, 2, 1.0));
  ema_update(t, st, 1.0);
  EXPECT_EQ(t.params.at("enc.w").value, Matrix(Matrix::Constant(2, 2, 1.0)));
  ema_update(t, st, 0.999);
  EXPECT_EQ(t.params.at("enc.w").value(0, 0), 0.999);
  st.at("enc.w").value << 1, 2, 3, 4;
  ema_update(t, st, 0.0);
  EXPECT_EQ(t.params.at("enc.w").value, st.at("enc.w").value);
  EXPECT_THROW(ema_update(t, st, 1.5), PreconditionError);
}

TEST(Ema, StudentUntouchedAndShapesChecked) {
  ParameterStore st;
  st.add("enc.w", Matrix::Constant(2, 3, 2.0));
  st.add("head.mask.w", Matrix::Constant(1, 1, 5.0));
  TeacherState t = make_teacher(st, 0.99, 0.999, 10);
  EXPECT_EQ(t.params.size(), 1u);
  st.at("enc.w").value.setConstant(4.0);
  const Matrix keep = st.at("enc.w").value;
  ema_update(t, st, 0.5);
  EXPECT_EQ(st.at("enc.w").value, keep);
  EXPECT_EQ(t.params.at("enc.w").value(1, 2), 3.0);
  st.at("enc.w").value = Matrix::Zero(3, 3);
  EXPECT_THROW(ema_update(t, st, 0.5), DimensionError);
}

TEST(EtaSchedule, LinearRamp) {
  TeacherState t;
  t.total_steps = 1000;
  t.current_step = 0;
  EXPECT_EQ(eta_schedule(t), 0.99);
  t.current_step = 1000;
  EXPECT_EQ(eta_schedule(t), 0.999);
  t.current_step = 500;
  EXPECT_NEAR(eta_schedule(t), 0.9945, 1e-15);
  t.current_step = 1001;
  EXPECT_THROW(eta_schedule(t), PreconditionError);
  EXPECT_THROW(make_teacher(ParameterStore(), 0.999, 0.99, 10), ConfigError);
}

TEST(TopBlocks, Averages) {
  const Matrix c1 = Matrix::Constant(3, 2, 1.0), c2 = Matrix::Constant(3, 2, 4.0);
  EXPECT_EQ(average_top_blocks({c1, c2}, 1), c2);
  EXPECT_EQ(average_top_blocks({c1, c2}, 2), Matrix(Matrix::Constant(3, 2, 2.5)));
  EXPECT_EQ(average_top_blocks({c2, c2, c2}, 3), c2);
  EXPECT_THROW(average_top_blocks({c1}, 0), PreconditionError);
  EXPECT_THROW(average_top_blocks({c1}, 2), PreconditionError);
}

TEST(TeacherTargets, TopOneIsLastBlock) {
  const model::ModelConfig c = tiny();
  ParameterStore s = student(c);
  Rng rng(2);
  const Matrix a = rng.normal_matrix(8, 4), v = rng.normal_matrix(8, 3);
  Tape t(false);
  const model::EncoderOutput enc = model::encode(t, c, s, a, v, 8);
  EXPECT_EQ(teacher_targets(c, s, a, v, 8, 1, TargetMode::av, TargetNorm::none).features, enc.blocks.back().value());
  const Matrix avg = (enc.blocks[0].value() + enc.blocks[1].value()) / 2.0;
  EXPECT_LT((teacher_targets(c, s, a, v, 8, 2, TargetMode::av, TargetNorm::none).features - avg).cwiseAbs().maxCoeff(),
            1e-15);
  Tape t2(false);
  EXPECT_EQ(teacher_targets(c, s, a, v, 8, 1, TargetMode::audio_only, TargetNorm::none).features,
            model::encode(t2, c, s, a, Matrix::Zero(8, 3), 8).features.value());
  EXPECT_THROW(teacher_targets(c, s, a, v, 8, 0, TargetMode::av), PreconditionError);
}

TEST(TargetNorm, Modes) {
  Rng rng(3);
  const Matrix x = rng.normal_matrix(8, 5, 3.0).array() + 2.0;
  EXPECT_EQ(normalize_targets(x, 4, TargetNorm::none), x);
  const Matrix f = normalize_targets(x, 4, TargetNorm::frame);
  for (Index r = 0; r < 8; ++r) {
    EXPECT_NEAR(f.row(r).mean(), 0.0, 1e-12);
    EXPECT_NEAR(f.row(r).squaredNorm() / 5.0, 1.0, 1e-5);
  }
  const Matrix t = normalize_targets(x, 4, TargetNorm::time);
  for (Index s = 0; s < 2; ++s)
    for (Index c = 0; c < 5; ++c) {
      const auto col = t.block(s * 4, c, 4, 1);
      const auto raw = x.block(s * 4, c, 4, 1);
      const double var = (raw.array() - raw.mean()).square().sum() / 4.0;
      EXPECT_NEAR(col.mean(), 0.0, 1e-12);
      EXPECT_NEAR(col.squaredNorm() / 4.0, var / (var + 1e-5), 1e-12);
    }
  EXPECT_THROW(normalize_targets(x, 3, TargetNorm::time), DimensionError);
  EXPECT_EQ(parse_target_norm("time"), TargetNorm::time);
  EXPECT_THROW(parse_target_norm("layer"), ConfigError);
}

TEST(MaskedPrediction, Oracles) {
  Tape t;
  const Matrix target = (Matrix(3, 2) << 1, 2, 3, 4, 5, 6).finished();
  Var s = t.constant((Matrix(3, 2) << 1, 2, 0, 4, 5, 9).finished());
  EXPECT_EQ(masked_prediction_loss(s, target, {}).scalar(), 0.0);
  EXPECT_EQ(masked_prediction_loss(s, target, {0}).scalar(), 0.0);
  EXPECT_NEAR(masked_prediction_loss(s, target, {1, 2}).scalar(), (9.0 + 0 + 0 + 9.0) / 4.0, 1e-15);
  EXPECT_THROW(masked_prediction_loss(s, target, {3}), IndexError);
  EXPECT_THROW(masked_prediction_loss(s, Matrix::Zero(2, 2), {0}), DimensionError);
}

TEST(CorruptedPrediction, AcpReducesToComponents) {
  const model::ModelConfig c = tiny();
  ParameterStore s = student(c, 4);
  ParameterStore teacher = student(c, 5);
  Rng rng(6);
  const Matrix a = rng.normal_matrix(8, 4), v = rng.normal_matrix(8, 3);
  const Matrix at = a + rng.normal_matrix(8, 4), vt = v + rng.normal_matrix(8, 3);
  const CorruptionPlan p = plan8();
  Tape t;
  const double got = corrupted_prediction_loss(t, TaskVariant::acp, c, s, teacher, a, at, v, vt, p).scalar();

  Tape ref(false);
  Var z = apply_head(ref, s, "acp", model::encode(ref, c, s, Matrix::Zero(8, 4), vt, 8).features);
  const Matrix target = teacher_targets(c, teacher, a, v, 8, 1, TargetMode::audio_only).features;
  EXPECT_EQ(got, masked_prediction_loss(z, target, p.video_corrupt).scalar());
  EXPECT_NEAR(got, mse_rows(z.value(), target, p.video_corrupt), 1e-12);
}

TEST(CorruptedPrediction, SelfConsistentWithoutCorruption) {
  const model::ModelConfig c = tiny();
  ParameterStore s = student(c, 7);
  Rng rng(8);
  const Matrix a = rng.normal_matrix(8, 4), v = rng.normal_matrix(8, 3);
  DistillOptions o;
  o.use_heads = false;
  o.target_norm = TargetNorm::none;
  Tape t;
  EXPECT_EQ(corrupted_prediction_loss(t, TaskVariant::avcp, c, s, s, a, a, v, v, plan8(), o).scalar(), 0.0);
}

TEST(CorruptedPrediction, EmptyIndexSetGivesZero) {
  const model::ModelConfig c = tiny();
  ParameterStore s = student(c);
  CorruptionPlan p = plan8();
  p.video_corrupt.clear();
  Rng rng(9);
  const Matrix a = rng.normal_matrix(8, 4), v = rng.normal_matrix(8, 3);
  Tape t;
  EXPECT_EQ(corrupted_prediction_loss(t, TaskVariant::acp, c, s, s, a, a, v, v, p).scalar(), 0.0);
  EXPECT_EQ(corrupted_prediction_loss(t, TaskVariant::macp, c, s, s, a, a, v, v, p).scalar(), 0.0);
}

TEST(CorruptedPrediction, EveryVariantFinite) {
  const model::ModelConfig c = tiny();
  ParameterStore s = student(c, 10), teacher = student(c, 11);
  Rng rng(12);
  const Matrix a = rng.normal_matrix(8, 4), v = rng.normal_matrix(8, 3);
  const Matrix at = a + rng.normal_matrix(8, 4), vt = v + rng.normal_matrix(8, 3);
  for (const char* name : {"avcp", "macp", "mvcp", "acp", "vcp", "acp_within", "vcp_within"}) {
    Tape t;
    const double l = corrupted_prediction_loss(t, parse_variant(name), c, s, teacher, a, at, v, vt, plan8()).scalar();
    EXPECT_TRUE(std::isfinite(l)) << name;
    EXPECT_GT(l, 0.0) << name;
  }
  EXPECT_THROW(parse_variant("xcp"), ConfigError);
}

TEST(CorruptedPrediction, VariantTable) {
  EXPECT_EQ(variant_spec(TaskVariant::acp).input, InputView::video_only);
  EXPECT_EQ(variant_spec(TaskVariant::acp).target, TargetMode::audio_only);
  EXPECT_EQ(variant_spec(TaskVariant::vcp).input, InputView::audio_only);
  EXPECT_EQ(variant_spec(TaskVariant::vcp).target, TargetMode::video_only);
  EXPECT_EQ(variant_spec(TaskVariant::macp).input, InputView::av);
  const CorruptionPlan p = plan8();
  EXPECT_EQ(variant_indices(TaskVariant::avcp, p), (IndexSet{1, 2, 5, 6}));
  EXPECT_EQ(variant_indices(TaskVariant::acp, p), p.video_corrupt);
  EXPECT_EQ(variant_indices(TaskVariant::mvcp, p), p.audio_corrupt);
}

TEST(TeacherIsolation, GradientsStayInStudent) {
  const model::ModelConfig c = tiny();
  ParameterStore s = student(c, 13);
  TeacherState teacher = make_teacher(s, 1.0, 1.0, 5);
  Rng rng(14);
  const Matrix a = rng.normal_matrix(8, 4), v = rng.normal_matrix(8, 3);
  const Matrix at = a + rng.normal_matrix(8, 4);
  const Matrix before = teacher_targets(c, teacher.params, a, v, 8, 2, TargetMode::av).features;
  Tape t;
  Var l = corrupted_prediction_loss(t, TaskVariant::vcp, c, s, teacher.params, a, at, v, v, plan8());
  t.backward(l);
  for (const auto& [name, p] : teacher.params) EXPECT_TRUE(p.grad.isZero(0.0)) << name;
  EXPECT_GT(s.at("enc.audio.w").grad.norm(), 0.0);
  for (auto& [name, p] : s) p.value -= 0.1 * p.grad;
  ema_update(teacher, s, eta_schedule(teacher));
  EXPECT_EQ(teacher_targets(c, teacher.params, a, v, 8, 2, TargetMode::av).features, before);
}

TEST(Mlm, ClosedForms) {
  ParameterStore s;
  s.add("head.mlm.w", Matrix::Zero(3, 8));
  s.add("head.mlm.b", Matrix::Zero(1, 8));
  Rng rng(15);
  const Matrix centroids = rng.normal_matrix(8, 3), feats = rng.normal_matrix(5, 3);
  Tape t;
  EXPECT_NEAR(mlm_loss(t, s, t.constant(feats), centroids, feats, {0, 2, 4}).scalar(), std::log(8.0), 1e-12);
  EXPECT_EQ(mlm_loss(t, s, t.constant(feats), centroids, feats, {}).scalar(), 0.0);

  const std::vector<int> ids = assign_clusters(feats, centroids);
  Matrix bias = Matrix::Zero(1, 8);
  bias(0, ids[1]) = 40.0;
  s.at("head.mlm.b").value = bias;
  std::vector<int> same;
  for (int r = 0; r < 5; ++r)
    if (ids[std::size_t(r)] == ids[1]) same.push_back(r);
  EXPECT_LT(mlm_loss(t, s, t.constant(feats), centroids, feats, same).scalar(), 1e-3);
  EXPECT_THROW(mlm_loss(t, s, t.constant(feats), centroids.topRows(1), feats, {0}), PreconditionError);
}

TEST(Mlm, NearestCentroidMatchesScan) {
  Rng rng(16);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix centroids = rng.normal_matrix(6, 4), x = rng.normal_matrix(30, 4);
    const std::vector<int> got = assign_clusters(x, centroids);
    for (Index r = 0; r < x.rows(); ++r) {
      int best = 0;
      double bd = (x.row(r) - centroids.row(0)).squaredNorm();
      for (Index k = 1; k < centroids.rows(); ++k) {
        const double d = (x.row(r) - centroids.row(k)).squaredNorm();
        if (d < bd) bd = d, best = int(k);
      }
      EXPECT_EQ(got[std::size_t(r)], best);
    }
  }
  const Matrix tie = (Matrix(2, 1) << -1, 1).finished();
  EXPECT_EQ(assign_clusters(Matrix::Zero(1, 1), tie), std::vector<int>{0});
}

TEST(TotalLoss, WeightedSum) {
  const TaskWeights w;
  EXPECT_NEAR(cav2vec_total_loss(TaskLosses{0.5, 0.5, 1.0, 0.2}, w), 2.4, 1e-15);
  EXPECT_EQ(cav2vec_total_loss(TaskLosses{3, 4, 5, 6}, TaskWeights{0, 0, 0, 0}), 0.0);
  Rng rng(17);
  for (int i = 0; i < 100; ++i) {
    const TaskLosses l{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
    const TaskWeights ww{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
    EXPECT_NEAR(cav2vec_total_loss(l, ww), ww.acp * l.acp + ww.vcp * l.vcp + ww.mask * l.mask + ww.mlm * l.mlm, 1e-15);
  }
  EXPECT_THROW(cav2vec_total_loss(TaskLosses{}, TaskWeights{-1, 0, 0, 0}), ConfigError);
  Tape t;
  Var v = cav2vec_total_loss(t.constant(Matrix::Constant(1, 1, 0.5)), t.constant(Matrix::Constant(1, 1, 0.5)),
                             t.constant(Matrix::Constant(1, 1, 1.0)), t.constant(Matrix::Constant(1, 1, 0.2)), w);
  EXPECT_NEAR(v.scalar(), 2.4, 1e-15);
}
