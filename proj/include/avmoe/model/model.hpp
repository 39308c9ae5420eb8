#pragma once

#include "avmoe/core/random.hpp"
#include "avmoe/core/tape.hpp"
#include "avmoe/data/synthetic.hpp"
#include "avmoe/moe/layer.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace avmoe::model {

using data::FrameSeq;
using data::Tokens;
using moe::Modality;

struct ModelConfig {
  int audio_dim = 16;
  int video_dim = 16;
  int d = 32;
  int h = 64;
  int encoder_blocks = 2;
  int decoder_blocks = 2;
  int vocab = 16;              ///< label ids 0..vocab-1; id `vocab` is BOS on input and EOS on output
  int topk_blocks = 2;         ///< teacher targets average this many top encoder blocks
  int frames_per_token = 4;    ///< encoder positions are expressed in token units
  moe::MoELayerConfig moe;     ///< d and h are taken from the model
  bool attention = true;       ///< off: encoder blocks skip the attention sublayer
  double frontend_bias_std = 1.0;  ///< init of enc.audio.b / enc.video.b

  void validate() const;
  moe::MoELayerConfig decoder_moe() const;
  int eos() const { return vocab; }
  int classes() const { return vocab + 1; }
};

/// Names: enc.audio.{w,b}, enc.video.{w,b}, enc.fuse.{w,b}, enc<i>.{q,k,v,o},
/// enc<i>.ffn.*, dec.embed, dec<i>.self.*, dec<i>.cross.*, dec<i>.moe.*,
/// dec.out.{w,b}.
void init_model(ParameterStore& store, const ModelConfig& cfg, Rng& rng);

/// Stacked sequences of equal length: row block b holds sequence b.
struct EncoderOutput {
  Var features;             ///< final block output
  std::vector<Var> blocks;  ///< every block output, first to last
};

/// An all-zero frame (dropped modality, masked span) yields a zero frontend
/// feature, bias included.
EncoderOutput encode(Tape& tape, const ModelConfig& cfg, ParameterStore& store, const Matrix& audio,
                     const Matrix& video, Index seq_frames);

struct DecoderOutput {
  Var logits;  ///< one row per position, classes() columns
  Var ce;
  std::vector<moe::MoEOutput> moe;  ///< one per decoder block, empty in dense mode
};

/// Teacher forcing. Sequence b reads BOS, y_0, .., y_{L-1} and predicts
/// y_0, .., y_{L-1}, EOS. All label sequences must share one length.
DecoderOutput decode_train(Tape& tape, const ModelConfig& cfg, ParameterStore& store, Var features,
                           Index seq_frames, const std::vector<Tokens>& labels,
                           const std::vector<Modality>& modalities, moe::ExpertCounter* counter = nullptr);

/// Logits for arbitrary input prefixes of a common length (first id BOS).
DecoderOutput decode_logits(Tape& tape, const ModelConfig& cfg, ParameterStore& store, Var features,
                            Index seq_frames, const std::vector<Tokens>& inputs,
                            const std::vector<Modality>& modalities, moe::ExpertCounter* counter = nullptr);

/// Argmax decoding until EOS or max_len tokens.
std::vector<Tokens> decode_greedy(const ModelConfig& cfg, ParameterStore& store, const Matrix& features,
                                  Index seq_frames, const std::vector<Modality>& modalities, int max_len);

/// Builds the stacked audio/video matrices of a batch.
Matrix stack(const std::vector<FrameSeq>& seqs);

struct ModelReport {
  long long total_params = 0;
  long long encoder_params = 0;
  long long decoder_ffn_total = 0;      ///< all FFN/expert parameters in the decoder
  long long decoder_ffn_activated = 0;  ///< touched per token
  double moe_flops_ratio = 0.0;         ///< activated / dense FFN flops per layer
};

ModelReport model_report(const ModelConfig& cfg, const ParameterStore& store);

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

inline constexpr const char* kCheckpointFormat = "avmoe-checkpoint-v1";

/// Flat map name -> {shape, values} plus the format tag and model config.
nlohmann::json checkpoint_json(const ModelConfig& cfg, const ParameterStore& store);
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ParameterStore& store);
void load_checkpoint(const std::filesystem::path& path, ModelConfig& cfg, ParameterStore& store);
void checkpoint_from_json(const nlohmann::json& j, ModelConfig& cfg, ParameterStore& store);

}  // namespace avmoe::model
