#include "avmoe/train/trainer.hpp"

#include "avmoe/core/kernels.hpp"
#include "avmoe/core/ops.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace avmoe::train {

using corruption::ModalityDrop;
using moe::Modality;
using Mode = moe::MoELayerConfig::Mode;
using nlohmann::json;

const char* regime_name(Regime r) {
  switch (r) {
    case Regime::supervised_moe: return "supervised_moe";
    case Regime::cav2vec_uptrain: return "cav2vec_uptrain";
    case Regime::combined_pipeline: return "combined_pipeline";
  }
  return "?";
}

Regime parse_regime(const std::string& name) {
  for (Regime r : {Regime::supervised_moe, Regime::cav2vec_uptrain, Regime::combined_pipeline})
    if (name == regime_name(r)) return r;
  throw ConfigError("unknown regime '" + name + "'");
}

namespace {

void validate_optim(const OptimizerConfig& o, const char* what) {
  if (o.steps < 1) throw ConfigError(std::string(what) + ": steps must be at least 1");
  if (o.batch < 1) throw ConfigError(std::string(what) + ": batch must be at least 1");
  if (!(o.lr > 0.0 && std::isfinite(o.lr))) throw ConfigError(std::string(what) + ": lr must be positive");
  if (!(o.clip_norm >= 0.0)) throw ConfigError(std::string(what) + ": clip_norm must be nonnegative");
  if (o.method != "sgd" && o.method != "adam")
    throw ConfigError(std::string(what) + ": method must be sgd or adam, got '" + o.method + "'");
  if (!(o.beta1 >= 0.0 && o.beta1 < 1.0 && o.beta2 >= 0.0 && o.beta2 < 1.0 && o.adam_eps > 0.0))
    throw ConfigError(std::string(what) + ": need betas in [0, 1) and adam_eps > 0");
}

bool uses_uptrain(Regime r) { return r != Regime::supervised_moe; }
bool uses_supervised(Regime r) { return r != Regime::cav2vec_uptrain; }

}  // namespace

void TrainConfig::validate() const {
  if (schema_version != 1) throw ConfigError("unsupported schema_version " + std::to_string(schema_version));
  model.validate();
  data.validate();
  if (data.vocab != model.vocab || data.audio_dim != model.audio_dim || data.video_dim != model.video_dim ||
      data.frames_per_token != model.frames_per_token)
    throw ConfigError("data and model disagree on vocab, frame widths or frames_per_token");
  if (seq_tokens < 1) throw ConfigError("seq_tokens must be at least 1");
  if (uses_supervised(regime)) validate_optim(optim, "optim");
  if (uses_uptrain(regime)) validate_optim(cav2vec.optim, "cav2vec.optim");
  const moe::LossCoefficients& c = supervised.coeffs;
  for (double v : {c.balance, c.biasing, c.z})
    if (!(v >= 0.0 && std::isfinite(v))) throw ConfigError("loss coefficients must be finite and nonnegative");
  if (!(supervised.drop_prob >= 0.0 && supervised.drop_prob <= 0.5))
    throw ConfigError("supervised.drop_prob must lie in [0, 0.5]");
  if (!(supervised.noise_prob >= 0.0 && supervised.noise_prob <= 1.0))
    throw ConfigError("supervised.noise_prob must lie in [0, 1]");
  if (supervised.freeze_encoder_steps < 0) throw ConfigError("freeze_encoder_steps must be nonnegative");
  cav2vec.weights.validate();
  for (const std::string& v : cav2vec.variants) distill::parse_variant(v);
  corruption::preset(cav2vec.preset);
  if (cav2vec.clusters < 2 || cav2vec.clusters > model.d) throw ConfigError("cav2vec.clusters must lie in [2, d]");
  if (!(cav2vec.eta_start >= 0.0 && cav2vec.eta_start <= cav2vec.eta_end && cav2vec.eta_end <= 1.0))
    throw ConfigError("cav2vec: need 0 <= eta_start <= eta_end <= 1");
  if (eval.pairs < 1) throw ConfigError("eval.pairs must be at least 1");
  for (const std::string& p : eval.presets) corruption::preset(p);
  corruption::preset(eval.distance_preset);
}

// ---------------------------------------------------------------------------
// config io

namespace {

json optim_json(const OptimizerConfig& o) {
  return {{"lr", o.lr},
          {"steps", o.steps},
          {"batch", o.batch},
          {"clip_norm", o.clip_norm},
          {"method", o.method},
          {"beta1", o.beta1},
          {"beta2", o.beta2},
          {"adam_eps", o.adam_eps}};
}

OptimizerConfig optim_from(const json& j, OptimizerConfig o) {
  o.lr = j.value("lr", o.lr);
  o.steps = j.value("steps", o.steps);
  o.batch = j.value("batch", o.batch);
  o.clip_norm = j.value("clip_norm", o.clip_norm);
  o.method = j.value("method", o.method);
  o.beta1 = j.value("beta1", o.beta1);
  o.beta2 = j.value("beta2", o.beta2);
  o.adam_eps = j.value("adam_eps", o.adam_eps);
  return o;
}

}  // namespace

void to_json(json& j, const TrainConfig& c) {
  const moe::LossCoefficients& k = c.supervised.coeffs;
  const distill::TaskWeights& w = c.cav2vec.weights;
  j = {{"schema_version", c.schema_version},
       {"regime", regime_name(c.regime)},
       {"seed", c.seed},
       {"model", c.model},
       {"data",
        {{"vocab", c.data.vocab},
         {"frames_per_token", c.data.frames_per_token},
         {"audio_dim", c.data.audio_dim},
         {"video_dim", c.data.video_dim},
         {"audio_noise", c.data.audio_noise},
         {"video_noise", c.data.video_noise},
         {"codebook_seed", c.data.codebook_seed}}},
       {"seq_tokens", c.seq_tokens},
       {"optim", optim_json(c.optim)},
       {"supervised",
        {{"c_b", k.balance},
         {"c_s", k.biasing},
         {"c_z", k.z},
         {"drop_prob", c.supervised.drop_prob},
         {"noise_prob", c.supervised.noise_prob},
         {"noise_snr_mean", c.supervised.noise_snr_mean},
         {"noise_snr_std", c.supervised.noise_snr_std},
         {"freeze_encoder_steps", c.supervised.freeze_encoder_steps}}},
       {"cav2vec",
        {{"optim", optim_json(c.cav2vec.optim)},
         {"preset", c.cav2vec.preset},
         {"lambda_acp", w.acp},
         {"lambda_vcp", w.vcp},
         {"lambda_mask", w.mask},
         {"lambda_mlm", w.mlm},
         {"variants", c.cav2vec.variants},
         {"eta_start", c.cav2vec.eta_start},
         {"eta_end", c.cav2vec.eta_end},
         {"clusters", c.cav2vec.clusters},
         {"target_norm", distill::target_norm_name(c.cav2vec.target_norm)}}},
       {"eval",
        {{"pairs", c.eval.pairs},
         {"snr_list", c.eval.snr_list},
         {"presets", c.eval.presets},
         {"distance_preset", c.eval.distance_preset}}}};
}

void from_json(const json& j, TrainConfig& c) {
  c = TrainConfig{};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (!j.contains("schema_version")) throw ConfigError("config lacks schema_version");
  c.schema_version = j.at("schema_version").get<int>();
  c.regime = parse_regime(j.value("regime", std::string(regime_name(c.regime))));
  c.seed = j.value("seed", c.seed);
  if (j.contains("model")) c.model = j.at("model").get<model::ModelConfig>();
  if (j.contains("data")) {
    const json& d = j.at("data");
    c.data.vocab = d.value("vocab", c.data.vocab);
    c.data.frames_per_token = d.value("frames_per_token", c.data.frames_per_token);
    c.data.audio_dim = d.value("audio_dim", c.data.audio_dim);
    c.data.video_dim = d.value("video_dim", c.data.video_dim);
    c.data.audio_noise = d.value("audio_noise", c.data.audio_noise);
    c.data.video_noise = d.value("video_noise", c.data.video_noise);
    c.data.codebook_seed = d.value("codebook_seed", c.data.codebook_seed);
  }
  c.seq_tokens = j.value("seq_tokens", c.seq_tokens);
  if (j.contains("optim")) c.optim = optim_from(j.at("optim"), c.optim);
  if (j.contains("supervised")) {
    const json& s = j.at("supervised");
    c.supervised.coeffs.balance = s.value("c_b", c.supervised.coeffs.balance);
    c.supervised.coeffs.biasing = s.value("c_s", c.supervised.coeffs.biasing);
    c.supervised.coeffs.z = s.value("c_z", c.supervised.coeffs.z);
    c.supervised.drop_prob = s.value("drop_prob", c.supervised.drop_prob);
    c.supervised.noise_prob = s.value("noise_prob", c.supervised.noise_prob);
    c.supervised.noise_snr_mean = s.value("noise_snr_mean", c.supervised.noise_snr_mean);
    c.supervised.noise_snr_std = s.value("noise_snr_std", c.supervised.noise_snr_std);
    c.supervised.freeze_encoder_steps = s.value("freeze_encoder_steps", c.supervised.freeze_encoder_steps);
  }
  if (j.contains("cav2vec")) {
    const json& s = j.at("cav2vec");
    Cav2vecConfig& v = c.cav2vec;
    if (s.contains("optim")) v.optim = optim_from(s.at("optim"), v.optim);
    v.preset = s.value("preset", v.preset);
    v.weights.acp = s.value("lambda_acp", v.weights.acp);
    v.weights.vcp = s.value("lambda_vcp", v.weights.vcp);
    v.weights.mask = s.value("lambda_mask", v.weights.mask);
    v.weights.mlm = s.value("lambda_mlm", v.weights.mlm);
    v.variants = s.value("variants", v.variants);
    v.eta_start = s.value("eta_start", v.eta_start);
    v.eta_end = s.value("eta_end", v.eta_end);
    v.clusters = s.value("clusters", v.clusters);
    v.target_norm = distill::parse_target_norm(s.value("target_norm", std::string(distill::target_norm_name(v.target_norm))));
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    c.eval.pairs = e.value("pairs", c.eval.pairs);
    c.eval.snr_list = e.value("snr_list", c.eval.snr_list);
    c.eval.presets = e.value("presets", c.eval.presets);
    c.eval.distance_preset = e.value("distance_preset", c.eval.distance_preset);
  }
  c.validate();
}

TrainConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  try {
    return j.get<TrainConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

DivergenceError::DivergenceError(long s, const std::string& last_finite)
    : NumericError("non-finite loss at step " + std::to_string(s) + "; last finite losses: " + last_finite),
      step(s) {}

// ---------------------------------------------------------------------------
// training

namespace {

const std::vector<std::string> kStepColumns = {"step",  "phase", "loss",  "ce",        "l_b",     "l_s",
                                               "l_z",   "l_acp", "l_vcp", "l_avcp",    "l_mask",  "l_mlm",
                                               "eta",   "n_audio", "n_video", "n_av", "subset_empty", "cv_load",
                                               "grad_norm", "q_audio", "q_video"};

struct StepLog {
  std::string phase;
  double loss = 0, ce = 0, l_b = 0, l_s = 0, l_z = 0;
  double l_acp = 0, l_vcp = 0, l_avcp = 0, l_mask = 0, l_mlm = 0, eta = 0;
  long long n_audio = 0, n_video = 0, n_av = 0, subset_empty = 0;
  double cv_load = 0, grad_norm = 0;
  double q_audio = 0, q_video = 0;  // inter-router weight of the own group on unimodal tokens

  std::string describe() const {
    std::ostringstream s;
    s << "loss=" << loss << " ce=" << ce << " l_b=" << l_b << " l_s=" << l_s << " l_z=" << l_z
      << " l_acp=" << l_acp << " l_vcp=" << l_vcp << " l_mask=" << l_mask << " l_mlm=" << l_mlm;
    return s.str();
  }
};

void log_step(metrics::CsvTable& t, long step, const StepLog& l) {
  t.add_row({static_cast<long long>(step), l.phase, l.loss, l.ce, l.l_b, l.l_s, l.l_z, l.l_acp, l.l_vcp, l.l_avcp,
             l.l_mask, l.l_mlm, l.eta, l.n_audio, l.n_video, l.n_av, l.subset_empty, l.cv_load, l.grad_norm, l.q_audio, l.q_video});
}

Modality modality_of(ModalityDrop d) {
  switch (d) {
    case ModalityDrop::drop_audio: return Modality::video;
    case ModalityDrop::drop_video: return Modality::audio;
    case ModalityDrop::none: break;
  }
  return Modality::audiovisual;
}

/// Global-norm clipping followed by a plain SGD or Adam update of the
/// parameters accepted by the filter.
class Optimizer {
 public:
  explicit Optimizer(const OptimizerConfig& cfg) : cfg_(cfg) {}

  template <class Filter>
  double step(ParameterStore& store, Filter train_param) {
    double sq = 0;
    for (auto& [name, p] : store)
      if (train_param(name)) sq += p.grad.squaredNorm();
    const double norm = std::sqrt(sq);
    const double factor = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    for (auto& [name, p] : store) {
      if (!train_param(name)) continue;
      if (cfg_.method == "sgd") {
        p.value -= (cfg_.lr * factor) * p.grad;
        continue;
      }
      auto [it, fresh] = moments_.try_emplace(name);
      if (fresh) it->second = {Matrix::Zero(p.value.rows(), p.value.cols()), Matrix::Zero(p.value.rows(), p.value.cols())};
      Matrix& m = it->second.first;
      Matrix& v = it->second.second;
      const Matrix g = factor * p.grad;
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
      const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
      p.value.array() -= cfg_.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.adam_eps);
    }
    return norm;
  }

 private:
  OptimizerConfig cfg_;
  long t_ = 0;
  std::map<std::string, std::pair<Matrix, Matrix>> moments_;
};

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

struct Batch {
  Matrix audio, video;
  std::vector<Modality> mods;
  std::vector<data::Tokens> labels;
};

Batch supervised_batch(const TrainConfig& cfg, const data::Codebooks& books, long step) {
  const int B = cfg.optim.batch;
  std::vector<data::FrameSeq> A, V;
  Batch b;
  for (int i = 0; i < B; ++i) {
    const std::uint64_t idx = static_cast<std::uint64_t>(step) * std::uint64_t(B) + std::uint64_t(i);
    data::SyntheticPair pair = data::generate_pair(cfg.data, books, cfg.seq_tokens, derive_seed(cfg.seed, "data", idx));
    Rng r(derive_seed(cfg.seed, "corruption", idx));
    const bool noisy = r.bernoulli(cfg.supervised.noise_prob);
    const double snr = cfg.supervised.noise_snr_mean + cfg.supervised.noise_snr_std * r.normal();
    const std::uint64_t noise_seed = r.engine()();
    const double u = r.uniform();
    if (noisy) pair.audio = corruption::noise_whole_audio(pair.audio, snr, noise_seed);
    Modality m = Modality::audiovisual;
    if (u < cfg.supervised.drop_prob) {
      pair.audio.setZero();
      m = Modality::video;
    } else if (u < 2.0 * cfg.supervised.drop_prob) {
      pair.video.setZero();
      m = Modality::audio;
    }
    A.push_back(std::move(pair.audio));
    V.push_back(std::move(pair.video));
    b.labels.push_back(std::move(pair.labels));
    b.mods.push_back(m);
  }
  b.audio = model::stack(A);
  b.video = model::stack(V);
  return b;
}

double cv_of_load(const std::vector<moe::MoEOutput>& layers) {
  double total = 0;
  int count = 0;
  for (const moe::MoEOutput& m : layers)
    for (std::size_t g = 0; g < m.stats.f.size(); ++g) {
      if (m.stats.group_tokens[g] == 0 || m.stats.f[g].size() < 2) continue;
      const RowVector& f = m.stats.f[g];
      total += metrics::coeff_of_variation(std::vector<double>(f.data(), f.data() + f.size()));
      ++count;
    }
  return count ? total / count : 0.0;
}

void run_supervised(const TrainConfig& cfg, const model::ModelConfig& mcfg, ParameterStore& store,
                    metrics::CsvTable& log, long step_offset, const char* phase) {
  const data::Codebooks books = data::make_codebooks(cfg.data);
  const moe::LossCoefficients& c = cfg.supervised.coeffs;
  const Index T = cfg.seq_frames();
  Optimizer opt(cfg.optim);
  StepLog last;
  for (long step = 0; step < cfg.optim.steps; ++step) {
    const Batch b = supervised_batch(cfg, books, step);
    store.zero_grad();
    Tape tape;
    const model::EncoderOutput enc = model::encode(tape, mcfg, store, b.audio, b.video, T);
    const model::DecoderOutput dec = model::decode_train(tape, mcfg, store, enc.features, T, b.labels, b.mods);
    StepLog l;
    l.phase = phase;
    Var total = dec.ce;
    for (const moe::MoEOutput& m : dec.moe) {
      total = ops::add(total, ops::scale(m.balance, c.balance));
      total = ops::add(total, ops::scale(m.biasing, c.biasing));
      total = ops::add(total, ops::scale(m.z, c.z));
      l.l_b += m.balance.scalar();
      l.l_s += m.biasing.scalar();
      l.l_z += m.z.scalar();
    }
    l.ce = dec.ce.scalar();
    l.loss = total.scalar();
    if (!std::isfinite(l.loss)) throw DivergenceError(step_offset + step, last.describe());
    for (Modality m : b.mods) {
      l.n_audio += m == Modality::audio;
      l.n_video += m == Modality::video;
      l.n_av += m == Modality::audiovisual;
    }
    l.subset_empty = (l.n_audio == 0 || l.n_video == 0) ? 1 : 0;
    l.cv_load = cv_of_load(dec.moe);
    for (const moe::MoEOutput& m : dec.moe) {
      if (m.stats.Q_audio.size() == 2) l.q_audio += m.stats.Q_audio(0) / double(dec.moe.size());
      if (m.stats.Q_video.size() == 2) l.q_video += m.stats.Q_video(1) / double(dec.moe.size());
    }
    tape.backward(total);
    const bool frozen = step < cfg.supervised.freeze_encoder_steps;
    l.grad_norm = opt.step(store, [&](const std::string& n) {
      return !starts_with(n, "head.") && !(frozen && starts_with(n, "enc"));
    });
    log_step(log, step_offset + step, l);
    last = l;
  }
}

bool is_acp_family(distill::TaskVariant v) {
  using distill::TaskVariant;
  return v == TaskVariant::acp || v == TaskVariant::macp || v == TaskVariant::acp_within;
}

/// Rows of a variant's index set that stay meaningful after modality dropout.
IndexSet usable_rows(distill::TaskVariant v, const corruption::CorruptionPlan& plan) {
  const distill::VariantSpec spec = distill::variant_spec(v);
  const bool no_audio = plan.modality_drop == ModalityDrop::drop_audio;
  const bool no_video = plan.modality_drop == ModalityDrop::drop_video;
  if ((spec.input == distill::InputView::audio_only && no_audio) ||
      (spec.input == distill::InputView::video_only && no_video))
    return {};
  switch (spec.indices) {
    case distill::IndexChoice::audio_corrupt: return no_audio ? IndexSet{} : plan.audio_corrupt;
    case distill::IndexChoice::video_corrupt: return no_video ? IndexSet{} : plan.video_corrupt;
    case distill::IndexChoice::corrupt_union:
      if (no_audio) return plan.video_corrupt;
      if (no_video) return plan.audio_corrupt;
      return plan.corrupt_union();
  }
  return {};
}

void append_offset(IndexSet& out, const IndexSet& rows, int offset) {
  for (int r : rows) out.push_back(r + offset);
}

ParameterStore without_heads(const ParameterStore& store) {
  ParameterStore out;
  for (const auto& [name, p] : store)
    if (!starts_with(name, "head.")) out.add(name, p.value);
  return out;
}

void run_uptrain(const TrainConfig& cfg, const model::ModelConfig& mcfg, ParameterStore& store,
                 metrics::CsvTable& log) {
  const Cav2vecConfig& cv = cfg.cav2vec;
  const data::Codebooks books = data::make_codebooks(cfg.data);
  const corruption::CorruptionPreset preset = corruption::preset(cv.preset);
  const int T = cfg.seq_frames();
  const int B = cv.optim.batch;

  std::vector<distill::TaskVariant> variants;
  std::vector<std::string> tasks = {"mask"};
  for (const std::string& name : cv.variants) {
    variants.push_back(distill::parse_variant(name));
    tasks.push_back(name);
  }
  Rng head_rng(derive_seed(cfg.seed, "heads"));
  distill::init_heads(store, mcfg.d, tasks, cv.weights.mlm > 0.0 ? cv.clusters : 0, head_rng);
  Rng centroid_rng(derive_seed(cfg.seed, "mlm-centroids"));
  const Matrix centroids = random_orthonormal(cv.clusters, mcfg.d, centroid_rng);

  distill::TeacherState teacher = distill::make_teacher(store, cv.eta_start, cv.eta_end, cv.optim.steps);
  bool need_audio_view = false, need_video_view = false, need_a_target = false, need_v_target = false;
  for (distill::TaskVariant v : variants) {
    const distill::VariantSpec s = distill::variant_spec(v);
    need_audio_view |= s.input == distill::InputView::audio_only;
    need_video_view |= s.input == distill::InputView::video_only;
    need_a_target |= s.target == distill::TargetMode::audio_only;
    need_v_target |= s.target == distill::TargetMode::video_only;
  }

  Optimizer opt(cv.optim);
  StepLog last;
  for (long step = 0; step < cv.optim.steps; ++step) {
    std::vector<data::FrameSeq> A, V, At, Vt;
    std::vector<corruption::CorruptionPlan> plans;
    for (int i = 0; i < B; ++i) {
      const std::uint64_t idx = static_cast<std::uint64_t>(step) * std::uint64_t(B) + std::uint64_t(i);
      data::SyntheticPair pair =
          data::generate_pair(cfg.data, books, cfg.seq_tokens, derive_seed(cfg.seed, "uptrain-data", idx));
      corruption::CorruptedSample s =
          corruption::corrupt_pair(pair, preset, derive_seed(cfg.seed, "uptrain-corruption", idx));
      A.push_back(std::move(pair.audio));
      V.push_back(std::move(pair.video));
      At.push_back(std::move(s.audio));
      Vt.push_back(std::move(s.video));
      plans.push_back(std::move(s.plan));
    }
    const Matrix a = model::stack(A), v = model::stack(V), at = model::stack(At), vt = model::stack(Vt);
    const Matrix za = Matrix::Zero(a.rows(), a.cols()), zv = Matrix::Zero(v.rows(), v.cols());

    const int topk = mcfg.topk_blocks;
    const distill::TargetNorm std_t = cv.target_norm;
    const Matrix target_av =
        distill::teacher_targets(mcfg, teacher.params, a, v, T, topk, distill::TargetMode::av, std_t).features;
    Matrix target_a, target_v;
    if (need_a_target)
      target_a = distill::teacher_targets(mcfg, teacher.params, a, v, T, topk, distill::TargetMode::audio_only, std_t)
                     .features;
    if (need_v_target)
      target_v = distill::teacher_targets(mcfg, teacher.params, a, v, T, topk, distill::TargetMode::video_only, std_t)
                     .features;

    store.zero_grad();
    Tape tape;
    Var f_av = model::encode(tape, mcfg, store, at, vt, T).features;
    Var f_a, f_v;
    if (need_audio_view) f_a = model::encode(tape, mcfg, store, at, zv, T).features;
    if (need_video_view) f_v = model::encode(tape, mcfg, store, za, vt, T).features;

    IndexSet mask_rows;
    for (int b = 0; b < B; ++b) append_offset(mask_rows, plans[std::size_t(b)].mask_union(), b * T);
    Var l_mask = distill::masked_prediction_loss(distill::apply_head(tape, store, "mask", f_av), target_av, mask_rows);
    Var l_mlm = tape.constant(Matrix::Zero(1, 1));
    if (cv.weights.mlm > 0.0) l_mlm = distill::mlm_loss(tape, store, f_av, centroids, target_av, mask_rows);

    Var l_acp = tape.constant(Matrix::Zero(1, 1)), l_vcp = l_acp, l_avcp = l_acp;
    for (distill::TaskVariant var : variants) {
      const distill::VariantSpec s = distill::variant_spec(var);
      IndexSet rows;
      for (int b = 0; b < B; ++b) append_offset(rows, usable_rows(var, plans[std::size_t(b)]), b * T);
      Var view = s.input == distill::InputView::av ? f_av : s.input == distill::InputView::audio_only ? f_a : f_v;
      const Matrix& target = s.target == distill::TargetMode::av           ? target_av
                             : s.target == distill::TargetMode::audio_only ? target_a
                                                                           : target_v;
      Var loss = distill::masked_prediction_loss(distill::apply_head(tape, store, distill::variant_name(var), view),
                                                 target, rows);
      if (var == distill::TaskVariant::avcp)
        l_avcp = ops::add(l_avcp, loss);
      else if (is_acp_family(var))
        l_acp = ops::add(l_acp, loss);
      else
        l_vcp = ops::add(l_vcp, loss);
    }
    Var total = distill::cav2vec_total_loss(l_acp, l_vcp, l_mask, l_mlm, cv.weights);
    total = ops::add(total, ops::scale(l_avcp, 0.5 * (cv.weights.acp + cv.weights.vcp)));

    StepLog l;
    l.phase = "uptrain";
    l.loss = total.scalar();
    l.l_acp = l_acp.scalar();
    l.l_vcp = l_vcp.scalar();
    l.l_avcp = l_avcp.scalar();
    l.l_mask = l_mask.scalar();
    l.l_mlm = l_mlm.scalar();
    if (!std::isfinite(l.loss)) throw DivergenceError(step, last.describe());
    teacher.current_step = step;
    l.eta = distill::eta_schedule(teacher);
    for (const corruption::CorruptionPlan& p : plans) {
      const Modality m = modality_of(p.modality_drop);
      l.n_audio += m == Modality::audio;
      l.n_video += m == Modality::video;
      l.n_av += m == Modality::audiovisual;
    }
    tape.backward(total);
    l.grad_norm = opt.step(store, [](const std::string& n) { return starts_with(n, "enc") || starts_with(n, "head."); });
    distill::ema_update(teacher, store, l.eta);
    log_step(log, step, l);
    last = l;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// evaluation

std::vector<data::SyntheticPair> eval_pairs(const TrainConfig& cfg, int count) {
  const data::Codebooks books = data::make_codebooks(cfg.data);
  std::vector<data::SyntheticPair> out;
  for (int i = 0; i < count; ++i)
    out.push_back(data::generate_pair(cfg.data, books, cfg.seq_tokens, derive_seed(cfg.seed, "eval", std::uint64_t(i))));
  return out;
}

double eval_ter(const TrainConfig& cfg, const model::ModelConfig& mcfg, ParameterStore& params,
                const std::string& preset_name, int pairs) {
  const corruption::CorruptionPreset p = corruption::preset(preset_name);
  const std::vector<data::SyntheticPair> clean = eval_pairs(cfg, pairs);
  std::vector<data::FrameSeq> A, V;
  std::vector<Modality> mods;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    corruption::CorruptedSample s = corruption::corrupt_pair(clean[i], p, derive_seed(cfg.seed, "eval-corruption", i));
    A.push_back(std::move(s.audio));
    V.push_back(std::move(s.video));
    mods.push_back(modality_of(s.plan.modality_drop));
  }
  Tape tape(false);
  const Matrix feats = model::encode(tape, mcfg, params, model::stack(A), model::stack(V), cfg.seq_frames()).features.value();
  const std::vector<data::Tokens> hyp =
      model::decode_greedy(mcfg, params, feats, cfg.seq_frames(), mods, cfg.seq_tokens + 2);
  std::size_t edits = 0, ref = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    edits += data::edit_distance(hyp[i], clean[i].labels);
    ref += clean[i].labels.size();
  }
  return double(edits) / double(ref);
}

namespace {

/// Teacher-forced decoder pass returning the routing of every MoE layer.
std::vector<moe::MoEOutput> route_pass(const TrainConfig& cfg, const model::ModelConfig& mcfg, ParameterStore& params,
                                       const Matrix& audio, const Matrix& video,
                                       const std::vector<data::Tokens>& labels, const std::vector<Modality>& mods) {
  Tape tape(false);
  const model::EncoderOutput enc = model::encode(tape, mcfg, params, audio, video, cfg.seq_frames());
  return model::decode_train(tape, mcfg, params, enc.features, cfg.seq_frames(), labels, mods).moe;
}

}  // namespace

std::vector<SnrPoint> eval_group_load_vs_snr(const TrainConfig& cfg, const model::ModelConfig& mcfg,
                                            ParameterStore& params, const std::vector<double>& snr_list,
                                            int pairs) {
  const moe::MoELayerConfig m = mcfg.decoder_moe();
  if (m.mode != Mode::hierarchical || m.groups != 2)
    throw ConfigError("group load vs SNR needs a two-group hierarchical decoder");
  const std::vector<data::SyntheticPair> clean = eval_pairs(cfg, pairs);
  std::vector<data::FrameSeq> V;
  std::vector<data::Tokens> labels;
  for (const auto& p : clean) {
    V.push_back(p.video);
    labels.push_back(p.labels);
  }
  const Matrix video = model::stack(V);
  const std::vector<Modality> mods(clean.size(), Modality::audiovisual);
  std::vector<SnrPoint> out;
  for (double snr : snr_list) {
    std::vector<data::FrameSeq> A;
    for (std::size_t i = 0; i < clean.size(); ++i)
      A.push_back(corruption::noise_whole_audio(clean[i].audio, snr, derive_seed(cfg.seed, "eval-snr", i)));
    const std::vector<moe::MoEOutput> layers = route_pass(cfg, mcfg, params, model::stack(A), video, labels, mods);
    SnrPoint pt;
    pt.snr_db = snr;
    double sum = 0, sq = 0;
    long long n = 0;
    for (const moe::MoEOutput& layer : layers) {
      double ls = 0;
      for (const moe::RoutingDecision& d : layer.decisions) {
        const double q = d.group_probs(1);
        ls += q;
        sum += q;
        sq += q * q;
        ++n;
      }
      pt.layer_mean_qv.push_back(ls / double(layer.decisions.size()));
    }
    pt.mean_qv = sum / double(n);
    pt.std_qv = std::sqrt(std::max(0.0, sq / double(n) - pt.mean_qv * pt.mean_qv));
    out.push_back(pt);
  }
  return out;
}

Specialization eval_expert_load(const TrainConfig& cfg, const model::ModelConfig& mcfg, ParameterStore& params,
                                int pairs, metrics::CsvTable* table) {
  const moe::MoELayerConfig m = mcfg.decoder_moe();
  const std::vector<data::SyntheticPair> clean = eval_pairs(cfg, pairs);
  std::vector<data::FrameSeq> A, V;
  std::vector<data::Tokens> labels;
  for (const auto& p : clean) {
    A.push_back(p.audio);
    V.push_back(p.video);
    labels.push_back(p.labels);
  }
  const Matrix audio = model::stack(A), video = model::stack(V);
  const Matrix za = Matrix::Zero(audio.rows(), audio.cols()), zv = Matrix::Zero(video.rows(), video.cols());
  if (table) *table = metrics::CsvTable({"layer", "condition", "expert", "group", "raw", "weighted"});
  Specialization s;
  const int n_total = m.total_experts();
  const int per_group = m.mode == Mode::sparse_topk || m.mode == Mode::dense_ffn ? n_total : m.n_per_group;
  struct Condition {
    Modality mod;
    const Matrix* a;
    const Matrix* v;
  };
  for (const Condition& c : {Condition{Modality::audio, &audio, &zv}, Condition{Modality::video, &za, &video},
                             Condition{Modality::audiovisual, &audio, &video}}) {
    const std::vector<Modality> mods(clean.size(), c.mod);
    if (m.mode == Mode::dense_ffn) {
      if (table)
        for (int l = 0; l < mcfg.decoder_blocks; ++l)
          table->add_row({(long long)l, std::string(moe::modality_name(c.mod)), 0LL, 0LL, 1.0, 1.0});
      continue;
    }
    const std::vector<moe::MoEOutput> layers = route_pass(cfg, mcfg, params, *c.a, *c.v, labels, mods);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      std::vector<double> raw(static_cast<std::size_t>(n_total), 0.0);
      for (const moe::RoutingDecision& d : layers[l].decisions)
        for (int e : d.experts) raw[std::size_t(e)] += 1.0;
      raw = metrics::normalize_histogram(raw);
      const RowVector w = moe::weighted_expert_load(layers[l].decisions, n_total);
      double group0 = 0, group1 = 0;
      for (int e = 0; e < n_total; ++e) {
        (e / per_group == 0 ? group0 : group1) += w(e);
        if (table)
          table->add_row({(long long)l, std::string(moe::modality_name(c.mod)), (long long)e,
                          (long long)(e / per_group), raw[std::size_t(e)], w(e)});
      }
      if (c.mod == Modality::audio) s.audio_group_on_audio.push_back(group0);
      if (c.mod == Modality::video) s.video_group_on_video.push_back(group1);
      if (c.mod == Modality::audiovisual) s.video_group_on_av.push_back(group1);
    }
  }
  if (!s.audio_group_on_audio.empty()) {
    s.min_audio = *std::min_element(s.audio_group_on_audio.begin(), s.audio_group_on_audio.end());
    s.min_video = *std::min_element(s.video_group_on_video.begin(), s.video_group_on_video.end());
  }
  return s;
}

double normalized_distance(const Matrix& clean, const Matrix& corrupted) {
  if (clean.rows() != corrupted.rows() || clean.cols() != corrupted.cols())
    throw DimensionError("normalized_distance: " + shape_string(clean) + " vs " + shape_string(corrupted));
  if (clean.rows() == 0) throw PreconditionError("normalized_distance: no frames");
  const Matrix a = kernels::normalize_rows(clean), b = kernels::normalize_rows(corrupted);
  double total = 0;
  for (Index r = 0; r < a.rows(); ++r) total += (a.row(r) - b.row(r)).norm();
  return total / double(a.rows());
}

double repr_distance(const TrainConfig& cfg, const model::ModelConfig& mcfg, ParameterStore& params,
                     const std::string& preset_name, int pairs) {
  const corruption::CorruptionPreset p = corruption::preset(preset_name);
  const std::vector<data::SyntheticPair> clean = eval_pairs(cfg, pairs);
  std::vector<data::FrameSeq> A, V, At, Vt;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    corruption::CorruptedSample s = corruption::corrupt_pair(clean[i], p, derive_seed(cfg.seed, "eval-corruption", i));
    A.push_back(clean[i].audio);
    V.push_back(clean[i].video);
    At.push_back(std::move(s.audio));
    Vt.push_back(std::move(s.video));
  }
  Tape tape(false);
  const Index T = cfg.seq_frames();
  const Matrix f = model::encode(tape, mcfg, params, model::stack(A), model::stack(V), T).features.value();
  const Matrix g = model::encode(tape, mcfg, params, model::stack(At), model::stack(Vt), T).features.value();
  return normalized_distance(f, g);
}

DistanceReport repr_distance_report(const TrainConfig& cfg, const model::ModelConfig& mcfg, ParameterStore& before,
                                    ParameterStore& after, const std::string& preset_name, int pairs) {
  DistanceReport r;
  r.d_before = repr_distance(cfg, mcfg, before, preset_name, pairs);
  r.d_after = repr_distance(cfg, mcfg, after, preset_name, pairs);
  r.relative_change = r.d_before > 0.0 ? (r.d_after - r.d_before) / r.d_before : 0.0;
  return r;
}

// ---------------------------------------------------------------------------

RunResult train(const TrainConfig& cfg) {
  cfg.validate();
  RunResult run;
  run.model = cfg.model;
  const model::ModelConfig& mcfg = run.model;
  Rng init_rng(derive_seed(cfg.seed, "model-init"));
  model::init_model(run.params, mcfg, init_rng);
  run.steps = metrics::CsvTable(kStepColumns);
  json summary;
  summary["regime"] = regime_name(cfg.regime);
  summary["seed"] = cfg.seed;
  summary["config"] = cfg;

  long offset = 0;
  if (uses_uptrain(cfg.regime)) {
    ParameterStore before = run.params;
    run_uptrain(cfg, mcfg, run.params, run.steps);
    run.params = without_heads(run.params);
    const DistanceReport d =
        repr_distance_report(cfg, mcfg, before, run.params, cfg.eval.distance_preset, cfg.eval.pairs);
    summary["repr_distance"] = {{"preset", cfg.eval.distance_preset},
                                {"d_before", d.d_before},
                                {"d_after", d.d_after},
                                {"relative_change", d.relative_change}};
    offset = cfg.cav2vec.optim.steps;
  }
  if (uses_supervised(cfg.regime))
    run_supervised(cfg, mcfg, run.params, run.steps, offset,
                   cfg.regime == Regime::combined_pipeline ? "finetune" : "supervised");

  // Loss curves and balance over the last 10% of supervised steps.
  json curves;
  for (const char* c : {"loss", "ce", "l_b", "l_s", "l_z", "l_acp", "l_vcp", "l_avcp", "l_mask", "l_mlm"})
    curves[c] = run.steps.numbers(c);
  summary["loss_curves"] = curves;
  if (uses_supervised(cfg.regime)) {
    const std::vector<double> cv = run.steps.numbers("cv_load");
    const std::size_t n = static_cast<std::size_t>(cfg.optim.steps);
    const std::size_t tail = std::max<std::size_t>(1, n / 10);
    double s = 0;
    for (std::size_t i = cv.size() - tail; i < cv.size(); ++i) s += cv[i];
    summary["balance_cv_last10"] = s / double(tail);
  }

  const Specialization spec = eval_expert_load(cfg, mcfg, run.params, cfg.eval.pairs, &run.expert_load);
  summary["expert_load"] = {{"audio_group_on_audio", spec.audio_group_on_audio},
                            {"video_group_on_video", spec.video_group_on_video},
                            {"video_group_on_av", spec.video_group_on_av},
                            {"min_audio_group_on_audio", spec.min_audio},
                            {"min_video_group_on_video", spec.min_video}};

  const moe::MoELayerConfig m = mcfg.decoder_moe();
  json curve = json::array();
  if (m.mode == Mode::hierarchical && m.groups == 2) {
    std::vector<std::string> header = {"snr_db", "mean_qv", "std_qv"};
    for (int l = 0; l < mcfg.decoder_blocks; ++l) header.push_back("layer" + std::to_string(l) + "_qv");
    run.group_load = metrics::CsvTable(header);
    const std::vector<SnrPoint> pts = eval_group_load_vs_snr(cfg, mcfg, run.params, cfg.eval.snr_list, cfg.eval.pairs);
    std::vector<double> snr, qv;
    for (const SnrPoint& p : pts) {
      std::vector<metrics::Cell> row = {p.snr_db, p.mean_qv, p.std_qv};
      for (double v : p.layer_mean_qv) row.push_back(v);
      run.group_load.add_row(row);
      curve.push_back({{"snr_db", p.snr_db}, {"mean_qv", p.mean_qv}, {"std_qv", p.std_qv}});
      snr.push_back(p.snr_db);
      qv.push_back(p.mean_qv);
    }
    summary["group_load_spearman"] = nullptr;
    if (pts.size() >= 2) {
      try {
        summary["group_load_spearman"] = metrics::spearman(snr, qv);
      } catch (const PreconditionError&) {
      }
    }
  } else {
    run.group_load = metrics::CsvTable({"snr_db", "mean_qv", "std_qv"});
  }
  summary["group_load_vs_snr"] = curve;

  const model::ModelReport mr = model::model_report(mcfg, run.params);
  const moe::FlopsReport fr = moe::flops_report(m, 1);
  summary["flops"] = {{"per_token_activated", fr.activated},
                      {"per_token_total", fr.total_param},
                      {"per_token_dense_ffn", fr.dense_ffn},
                      {"activated_over_dense", fr.ratio},
                      {"total_params", mr.total_params},
                      {"encoder_params", mr.encoder_params},
                      {"decoder_ffn_total", mr.decoder_ffn_total},
                      {"decoder_ffn_activated", mr.decoder_ffn_activated}};

  json ter = json::object();
  for (const std::string& p : cfg.eval.presets) ter[p] = eval_ter(cfg, mcfg, run.params, p, cfg.eval.pairs);
  summary["ter"] = ter;
  run.summary = std::move(summary);
  return run;
}

void write_run(const RunResult& run, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  metrics::write_table(run.steps, dir / "steps.csv");
  metrics::write_table(run.expert_load, dir / "expert_load.csv");
  metrics::write_table(run.group_load, dir / "group_load_vs_snr.csv");
  metrics::write_text_atomic(dir / "summary.json", run.summary.dump(2) + "\n");
  model::save_checkpoint(dir / "checkpoint.json", run.model, run.params);
}

json build_report(const std::filesystem::path& dir) {
  std::ifstream in(dir / "summary.json");
  if (!in) throw ConfigError("no summary.json in " + dir.string());
  json summary;
  try {
    summary = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("summary.json: ") + e.what());
  }
  const metrics::CsvTable steps = metrics::read_table(dir / "steps.csv");
  const metrics::CsvTable load = metrics::read_table(dir / "expert_load.csv");
  const metrics::CsvTable snr = metrics::read_table(dir / "group_load_vs_snr.csv");

  json report;
  json curves;
  curves["step"] = steps.numbers("step");
  for (const char* c : {"loss", "ce", "l_b", "l_s", "l_z", "l_acp", "l_vcp", "l_avcp", "l_mask", "l_mlm"})
    curves[c] = steps.numbers(c);
  report["loss_curves"] = curves;
  json rows = json::array();
  for (std::size_t r = 0; r < load.size(); ++r)
    rows.push_back({{"layer", load.number(r, 0)},
                    {"condition", load.cell(r, 1)},
                    {"expert", load.number(r, 2)},
                    {"group", load.number(r, 3)},
                    {"raw", load.number(r, 4)},
                    {"weighted", load.number(r, 5)}});
  report["expert_load"] = {{"table", rows}, {"summary", summary.value("expert_load", json::object())}};
  json curve = json::array();
  for (std::size_t r = 0; r < snr.size(); ++r)
    curve.push_back({{"snr_db", snr.number(r, 0)}, {"mean_qv", snr.number(r, 1)}, {"std_qv", snr.number(r, 2)}});
  report["group_load_vs_snr"] = {{"curve", curve}, {"spearman", summary.value("group_load_spearman", json())}};
  report["flops"] = summary.value("flops", json::object());
  report["ter"] = summary.value("ter", json::object());
  if (summary.contains("repr_distance")) report["repr_distance"] = summary["repr_distance"];
  return report;
}

}  // namespace avmoe::train
