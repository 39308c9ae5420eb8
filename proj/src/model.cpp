#include "avmoe/model/model.hpp"

#include "avmoe/core/kernels.hpp"
#include "avmoe/core/ops.hpp"
#include "avmoe/metrics/metrics.hpp"

#include <fstream>

namespace avmoe::model {

namespace {

constexpr double kPositionBase = 100.0;
constexpr double kNormEps = 1e-5;

Var param(Tape& tape, ParameterStore& store, const std::string& name) { return tape.parameter(store.at(name)); }

Var linear(Tape& tape, ParameterStore& store, const std::string& p, Var x) {
  return ops::add_row(ops::matmul(x, param(tape, store, p + "w")), param(tape, store, p + "b"));
}

Var frontend(Tape& tape, ParameterStore& store, const std::string& p, const Matrix& frames) {
  Matrix present(frames.rows(), 1);
  for (Index r = 0; r < frames.rows(); ++r) present(r, 0) = frames.row(r).isZero(0.0) ? 0.0 : 1.0;
  return ops::scale_rows(linear(tape, store, p, tape.constant(frames)), tape.constant(present));
}

void add_linear(ParameterStore& store, const std::string& p, int in, int out, Rng& rng) {
  store.add(p + "w", rng.normal_matrix(in, out, 1.0 / std::sqrt(double(in))));
  store.add(p + "b", Matrix::Zero(1, out));
}

void add_attention(ParameterStore& store, const std::string& p, int d, Rng& rng) {
  for (const char* w : {"q", "k", "v", "o"}) store.add(p + w, rng.normal_matrix(d, d, 1.0 / std::sqrt(double(d))));
}

/// Position rows for `count` stacked sequences of `len` rows each.
Matrix tiled_positions(const std::vector<double>& pos, Index count, Index dim) {
  const Matrix one = kernels::sinusoidal_positions(pos, dim, kPositionBase);
  Matrix out(one.rows() * count, dim);
  for (Index b = 0; b < count; ++b) out.middleRows(b * one.rows(), one.rows()) = one;
  return out;
}

Var attend(Tape& tape, ParameterStore& store, const std::string& p, Var query_in, Var kv_in, const Matrix& qpos,
           const Matrix& kpos, const ops::AttentionOptions& opt) {
  Var q = ops::matmul(ops::add_constant(query_in, qpos), param(tape, store, p + "q"));
  Var k = ops::matmul(ops::add_constant(kv_in, kpos), param(tape, store, p + "k"));
  Var v = ops::matmul(kv_in, param(tape, store, p + "v"));
  return ops::matmul(ops::attention(q, k, v, opt), param(tape, store, p + "o"));
}

Var residual(Var x, Var sub) { return ops::standardize_rows(ops::add(x, sub), kNormEps); }

std::string block(const char* kind, int i) { return std::string(kind) + std::to_string(i) + "."; }

}  // namespace

void ModelConfig::validate() const {
  if (audio_dim < 1 || video_dim < 1 || d < 1 || h < 1) throw ConfigError("model: dimensions must be positive");
  if (encoder_blocks < 1 || decoder_blocks < 1) throw ConfigError("model: need at least one encoder and decoder block");
  if (vocab < 2) throw ConfigError("model: vocab must be at least 2");
  if (topk_blocks < 1 || topk_blocks > encoder_blocks)
    throw ConfigError("model: topk_blocks must lie in [1, encoder_blocks]");
  if (frames_per_token < 1) throw ConfigError("model: frames_per_token must be positive");
  if (!(frontend_bias_std >= 0)) throw ConfigError("model: frontend_bias_std must be non-negative");
  decoder_moe().validate();
}

moe::MoELayerConfig ModelConfig::decoder_moe() const {
  moe::MoELayerConfig m = moe;
  m.d = d;
  m.h = h;
  return m;
}

void init_model(ParameterStore& store, const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  add_linear(store, "enc.audio.", cfg.audio_dim, cfg.d, rng);
  add_linear(store, "enc.video.", cfg.video_dim, cfg.d, rng);
  store.at("enc.audio.b").value = rng.normal_matrix(1, cfg.d, cfg.frontend_bias_std);
  store.at("enc.video.b").value = rng.normal_matrix(1, cfg.d, cfg.frontend_bias_std);
  add_linear(store, "enc.fuse.", 2 * cfg.d, cfg.d, rng);
  moe::MoELayerConfig ffn;
  ffn.mode = moe::MoELayerConfig::Mode::dense_ffn;
  ffn.d = cfg.d;
  ffn.h = cfg.h;
  for (int i = 0; i < cfg.encoder_blocks; ++i) {
    add_attention(store, block("enc", i), cfg.d, rng);
    moe::init_moe_layer(store, block("enc", i), ffn, rng);
  }
  store.add("dec.embed", rng.normal_matrix(cfg.classes(), cfg.d));
  for (int i = 0; i < cfg.decoder_blocks; ++i) {
    add_attention(store, block("dec", i) + "self.", cfg.d, rng);
    add_attention(store, block("dec", i) + "cross.", cfg.d, rng);
    moe::init_moe_layer(store, block("dec", i) + "moe.", cfg.decoder_moe(), rng);
  }
  add_linear(store, "dec.out.", cfg.d, cfg.classes(), rng);
}

EncoderOutput encode(Tape& tape, const ModelConfig& cfg, ParameterStore& store, const Matrix& audio,
                     const Matrix& video, Index seq_frames) {
  if (audio.rows() != video.rows())
    throw DimensionError("encode: audio has " + std::to_string(audio.rows()) + " frames, video " +
                         std::to_string(video.rows()));
  if (audio.cols() != cfg.audio_dim || video.cols() != cfg.video_dim)
    throw DimensionError("encode: frame widths " + shape_string(audio) + ", " + shape_string(video));
  if (seq_frames < 1 || audio.rows() % seq_frames != 0)
    throw DimensionError("encode: " + std::to_string(audio.rows()) + " frames do not split into sequences of " +
                         std::to_string(seq_frames));
  const Index count = audio.rows() / seq_frames;
  Var a = frontend(tape, store, "enc.audio.", audio);
  Var v = frontend(tape, store, "enc.video.", video);
  Var x = linear(tape, store, "enc.fuse.", ops::concat_cols(a, v));

  std::vector<double> pos(static_cast<std::size_t>(seq_frames));
  for (Index f = 0; f < seq_frames; ++f) pos[std::size_t(f)] = (double(f) + 0.5) / cfg.frames_per_token - 0.5;
  const Matrix P = tiled_positions(pos, count, cfg.d);
  ops::AttentionOptions opt;
  opt.query_segment = opt.key_segment = seq_frames;

  EncoderOutput out;
  for (int i = 0; i < cfg.encoder_blocks; ++i) {
    const std::string p = block("enc", i);
    if (cfg.attention) x = residual(x, attend(tape, store, p, x, x, P, P, opt));
    x = residual(x, moe::expert_forward(tape, store, p + "ffn.", x));
    out.blocks.push_back(x);
  }
  out.features = x;
  return out;
}

DecoderOutput decode_logits(Tape& tape, const ModelConfig& cfg, ParameterStore& store, Var features,
                            Index seq_frames, const std::vector<Tokens>& inputs,
                            const std::vector<Modality>& modalities, moe::ExpertCounter* counter) {
  if (inputs.empty()) throw PreconditionError("decode: empty batch");
  if (inputs.size() != modalities.size())
    throw DimensionError("decode: " + std::to_string(inputs.size()) + " sequences, " +
                         std::to_string(modalities.size()) + " modality tags");
  const Index count = static_cast<Index>(inputs.size());
  if (features.rows() != count * seq_frames)
    throw DimensionError("decode: features " + shape_string(features.value()) + " for " + std::to_string(count) +
                         " sequences of " + std::to_string(seq_frames) + " frames");
  const Index len = static_cast<Index>(inputs[0].size());
  std::vector<int> ids;
  std::vector<Modality> token_mod;
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    if (static_cast<Index>(inputs[b].size()) != len) throw DimensionError("decode: input sequences differ in length");
    for (int id : inputs[b]) {
      if (id < 0 || id >= cfg.classes()) throw IndexError("decode: token id " + std::to_string(id) + " out of range");
      ids.push_back(id);
      token_mod.push_back(modalities[b]);
    }
  }

  std::vector<double> qpos(static_cast<std::size_t>(len)), kpos(static_cast<std::size_t>(seq_frames));
  for (Index j = 0; j < len; ++j) qpos[std::size_t(j)] = double(j);
  for (Index f = 0; f < seq_frames; ++f) kpos[std::size_t(f)] = (double(f) + 0.5) / cfg.frames_per_token - 0.5;
  const Matrix PQ = tiled_positions(qpos, count, cfg.d), PK = tiled_positions(kpos, count, cfg.d);
  ops::AttentionOptions self;
  self.causal = true;
  self.query_segment = self.key_segment = len;
  ops::AttentionOptions cross;
  cross.query_segment = len;
  cross.key_segment = seq_frames;

  DecoderOutput out;
  const moe::MoELayerConfig mcfg = cfg.decoder_moe();
  Var x = ops::gather_rows(param(tape, store, "dec.embed"), ids);
  for (int i = 0; i < cfg.decoder_blocks; ++i) {
    const std::string p = block("dec", i);
    x = residual(x, attend(tape, store, p + "self.", x, x, PQ, PQ, self));
    x = residual(x, attend(tape, store, p + "cross.", x, features, PQ, PK, cross));
    moe::MoEOutput m = moe::moe_forward(tape, store, p + "moe.", mcfg, x, token_mod, counter);
    x = residual(x, m.y);
    if (mcfg.mode != moe::MoELayerConfig::Mode::dense_ffn) out.moe.push_back(std::move(m));
  }
  out.logits = linear(tape, store, "dec.out.", x);
  return out;
}

DecoderOutput decode_train(Tape& tape, const ModelConfig& cfg, ParameterStore& store, Var features,
                           Index seq_frames, const std::vector<Tokens>& labels,
                           const std::vector<Modality>& modalities, moe::ExpertCounter* counter) {
  std::vector<Tokens> inputs;
  std::vector<int> targets;
  for (const Tokens& y : labels) {
    Tokens in = {cfg.eos()};
    for (int id : y) {
      if (id < 0 || id >= cfg.vocab) throw IndexError("decode_train: label " + std::to_string(id) + " outside vocab");
      in.push_back(id);
      targets.push_back(id);
    }
    targets.push_back(cfg.eos());
    inputs.push_back(std::move(in));
  }
  DecoderOutput out = decode_logits(tape, cfg, store, features, seq_frames, inputs, modalities, counter);
  out.ce = ops::cross_entropy(out.logits, targets);
  return out;
}

std::vector<Tokens> decode_greedy(const ModelConfig& cfg, ParameterStore& store, const Matrix& features,
                                  Index seq_frames, const std::vector<Modality>& modalities, int max_len) {
  if (max_len < 1) throw PreconditionError("decode_greedy: max_len must be positive");
  const std::size_t count = modalities.size();
  std::vector<Tokens> inputs(count, Tokens{cfg.eos()});
  std::vector<Tokens> result(count);
  std::vector<bool> done(count, false);
  for (int step = 0; step < max_len; ++step) {
    Tape tape(false);
    DecoderOutput out =
        decode_logits(tape, cfg, store, tape.constant(features), seq_frames, inputs, modalities);
    const Index len = step + 1;
    bool all_done = true;
    for (std::size_t b = 0; b < count; ++b) {
      Index best;
      out.logits.value().row(static_cast<Index>(b) * len + step).maxCoeff(&best);
      const int id = static_cast<int>(best);
      if (!done[b]) {
        if (id == cfg.eos())
          done[b] = true;
        else
          result[b].push_back(id);
      }
      inputs[b].push_back(id);
      all_done = all_done && done[b];
    }
    if (all_done) break;
  }
  return result;
}

Matrix stack(const std::vector<FrameSeq>& seqs) {
  if (seqs.empty()) throw PreconditionError("stack: no sequences");
  Index rows = 0;
  for (const FrameSeq& s : seqs) {
    if (s.cols() != seqs[0].cols()) throw DimensionError("stack: frame widths differ");
    rows += s.rows();
  }
  Matrix out(rows, seqs[0].cols());
  Index r = 0;
  for (const FrameSeq& s : seqs) {
    out.middleRows(r, s.rows()) = s;
    r += s.rows();
  }
  return out;
}

ModelReport model_report(const ModelConfig& cfg, const ParameterStore& store) {
  ModelReport r;
  r.total_params = store.scalar_count();
  for (const auto& [name, p] : store)
    if (name.rfind("enc", 0) == 0) r.encoder_params += p.value.size();
  const moe::ParamReport pr = moe::param_report(cfg.decoder_moe());
  r.decoder_ffn_total = pr.total_ffn * cfg.decoder_blocks;
  r.decoder_ffn_activated = pr.activated_ffn * cfg.decoder_blocks;
  r.moe_flops_ratio = moe::flops_report(cfg.decoder_moe(), 1).ratio;
  return r;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  const moe::MoELayerConfig& m = c.moe;
  j = {{"audio_dim", c.audio_dim},
       {"video_dim", c.video_dim},
       {"d", c.d},
       {"h", c.h},
       {"encoder_blocks", c.encoder_blocks},
       {"decoder_blocks", c.decoder_blocks},
       {"vocab", c.vocab},
       {"topk_blocks", c.topk_blocks},
       {"frames_per_token", c.frames_per_token},
       {"attention", c.attention},
       {"frontend_bias_std", c.frontend_bias_std},
       {"moe",
        {{"mode", moe::mode_name(m.mode)},
         {"n_experts", m.n_experts},
         {"k", m.k},
         {"groups", m.groups},
         {"n_per_group", m.n_per_group},
         {"m", m.m},
         {"k_per_group", m.k_per_group},
         {"audio_weight", m.audio_weight},
         {"z_loss_inter", m.z_loss_inter},
         {"z_loss_intra", m.z_loss_intra}}}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  const ModelConfig def;
  c.audio_dim = j.value("audio_dim", def.audio_dim);
  c.video_dim = j.value("video_dim", def.video_dim);
  c.d = j.value("d", def.d);
  c.h = j.value("h", def.h);
  c.encoder_blocks = j.value("encoder_blocks", def.encoder_blocks);
  c.decoder_blocks = j.value("decoder_blocks", def.decoder_blocks);
  c.vocab = j.value("vocab", def.vocab);
  c.topk_blocks = j.value("topk_blocks", def.topk_blocks);
  c.frames_per_token = j.value("frames_per_token", def.frames_per_token);
  c.attention = j.value("attention", def.attention);
  c.frontend_bias_std = j.value("frontend_bias_std", def.frontend_bias_std);
  if (j.contains("moe")) {
    const nlohmann::json& m = j.at("moe");
    c.moe.mode = moe::parse_mode(m.value("mode", std::string(moe::mode_name(def.moe.mode))));
    c.moe.n_experts = m.value("n_experts", def.moe.n_experts);
    c.moe.k = m.value("k", def.moe.k);
    c.moe.groups = m.value("groups", def.moe.groups);
    c.moe.n_per_group = m.value("n_per_group", def.moe.n_per_group);
    c.moe.m = m.value("m", def.moe.m);
    c.moe.k_per_group = m.value("k_per_group", def.moe.k_per_group);
    c.moe.audio_weight = m.value("audio_weight", def.moe.audio_weight);
    c.moe.z_loss_inter = m.value("z_loss_inter", def.moe.z_loss_inter);
    c.moe.z_loss_intra = m.value("z_loss_intra", def.moe.z_loss_intra);
  }
  c.validate();
}

nlohmann::json checkpoint_json(const ModelConfig& cfg, const ParameterStore& store) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, p] : store) {
    std::vector<double> values(p.value.data(), p.value.data() + p.value.size());
    params[name] = {{"shape", {p.value.rows(), p.value.cols()}}, {"values", values}};
  }
  return {{"format", kCheckpointFormat}, {"config", cfg}, {"params", params}};
}

void checkpoint_from_json(const nlohmann::json& j, ModelConfig& cfg, ParameterStore& store) {
  if (j.value("format", std::string()) != kCheckpointFormat)
    throw ParseError("checkpoint: expected format tag " + std::string(kCheckpointFormat));
  cfg = j.at("config").get<ModelConfig>();
  ParameterStore loaded;
  for (const auto& [name, entry] : j.at("params").items()) {
    const auto shape = entry.at("shape").get<std::vector<Index>>();
    const auto values = entry.at("values").get<std::vector<double>>();
    if (shape.size() != 2 || shape[0] * shape[1] != static_cast<Index>(values.size()))
      throw ParseError("checkpoint: parameter " + name + " has inconsistent shape");
    loaded.add(name, Eigen::Map<const Matrix>(values.data(), shape[0], shape[1]));
  }
  store = std::move(loaded);
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ParameterStore& store) {
  metrics::write_text_atomic(path, checkpoint_json(cfg, store).dump() + "\n");
}

void load_checkpoint(const std::filesystem::path& path, ModelConfig& cfg, ParameterStore& store) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("checkpoint " + path.string() + ": " + e.what());
  }
  checkpoint_from_json(j, cfg, store);
}

}  // namespace avmoe::model
