#pragma once

#include "avmoe/corruption/corruption.hpp"
#include "avmoe/distill/distill.hpp"
#include "avmoe/metrics/metrics.hpp"
#include "avmoe/model/model.hpp"
#include "avmoe/moe/losses.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace avmoe::train {

enum class Regime { supervised_moe, cav2vec_uptrain, combined_pipeline };

const char* regime_name(Regime r);
Regime parse_regime(const std::string& name);

struct OptimizerConfig {
  double lr = 0.05;
  int steps = 2000;
  int batch = 8;
  double clip_norm = 5.0;  ///< global gradient norm cap, 0 disables
  std::string method = "sgd";  ///< sgd or adam
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
};

struct SupervisedConfig {
  moe::LossCoefficients coeffs;
  double drop_prob = 0.25;        ///< per modality
  double noise_prob = 0.25;       ///< whole-audio noise augmentation
  double noise_snr_mean = 0.0;
  double noise_snr_std = 5.0;
  int freeze_encoder_steps = 0;
};

struct Cav2vecConfig {
  OptimizerConfig optim{0.05, 2000, 8, 5.0};
  std::string preset = "train-default";
  distill::TaskWeights weights;
  std::vector<std::string> variants = {"acp", "vcp"};
  double eta_start = 0.99;
  double eta_end = 0.999;
  int clusters = 16;
  distill::TargetNorm target_norm = distill::TargetNorm::time;
};

struct EvalConfig {
  int pairs = 64;
  std::vector<double> snr_list = {-10, -5, 0, 5, 10};
  std::vector<std::string> presets = {"clean", "eval-joint", "eval-fullnoise"};
  std::string distance_preset = "eval-joint";
};

struct TrainConfig {
  int schema_version = 1;
  Regime regime = Regime::supervised_moe;
  std::uint64_t seed = 1;
  model::ModelConfig model;
  data::GeneratorConfig data;
  int seq_tokens = 6;
  OptimizerConfig optim;
  SupervisedConfig supervised;
  Cav2vecConfig cav2vec;
  EvalConfig eval;

  void validate() const;
  int seq_frames() const { return seq_tokens * data.frames_per_token; }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Parses a config file; malformed JSON raises ParseError naming line and column.
TrainConfig load_config(const std::filesystem::path& path);
TrainConfig parse_config(const std::string& text);

/// Non-finite loss during training.
struct DivergenceError : NumericError {
  DivergenceError(long step, const std::string& last_finite);
  long step;
};

struct RunResult {
  model::ModelConfig model;
  ParameterStore params;
  metrics::CsvTable steps;
  metrics::CsvTable expert_load;
  metrics::CsvTable group_load;  ///< empty header outside hierarchical mode
  nlohmann::json summary;
};

/// Runs the configured regime and evaluates the result.
RunResult train(const TrainConfig& cfg);

/// steps.csv, summary.json, expert_load.csv, group_load_vs_snr.csv, checkpoint.json.
void write_run(const RunResult& run, const std::filesystem::path& dir);

/// Derived report keys: loss_curves, expert_load, group_load_vs_snr, flops, ter.
nlohmann::json build_report(const std::filesystem::path& run_dir);

// Evaluation pieces, also used directly by tests.

std::vector<data::SyntheticPair> eval_pairs(const TrainConfig& cfg, int count);

/// Mean TER of greedy decoding under a corruption preset.
double eval_ter(const TrainConfig& cfg, const model::ModelConfig& mcfg, ParameterStore& params,
                const std::string& preset_name, int pairs);

struct SnrPoint {
  double snr_db = 0.0;
  double mean_qv = 0.0;
  double std_qv = 0.0;
  std::vector<double> layer_mean_qv;
};

/// Audio of every pair noised over its full length at each SNR; reports the
/// inter-router weight of the visual group on the resulting AV tokens.
std::vector<SnrPoint> eval_group_load_vs_snr(const TrainConfig& cfg, const model::ModelConfig& mcfg,
                                            ParameterStore& params, const std::vector<double>& snr_list,
                                            int pairs);

struct Specialization {
  std::vector<double> audio_group_on_audio;  ///< per decoder layer
  std::vector<double> video_group_on_video;
  std::vector<double> video_group_on_av;
  double min_audio = 0.0;
  double min_video = 0.0;
};

/// Expert loads on clean held-out pairs under audio-only, video-only and AV
/// inputs. Fills `table` with per-layer, per-expert raw and q-weighted loads.
Specialization eval_expert_load(const TrainConfig& cfg, const model::ModelConfig& mcfg, ParameterStore& params,
                                int pairs, metrics::CsvTable* table);

struct DistanceReport {
  double d_before = 0.0;
  double d_after = 0.0;
  double relative_change = 0.0;  ///< (after - before) / before, 0 when before is 0
};

/// Mean over frames of || normalize(f_clean) - normalize(f_corrupted) ||.
double normalized_distance(const Matrix& clean, const Matrix& corrupted);

/// Encoder feature distance between clean and preset-corrupted inputs.
double repr_distance(const TrainConfig& cfg, const model::ModelConfig& mcfg, ParameterStore& params,
                     const std::string& preset_name, int pairs);

DistanceReport repr_distance_report(const TrainConfig& cfg, const model::ModelConfig& mcfg, ParameterStore& before,
                                    ParameterStore& after, const std::string& preset_name, int pairs);

}  // namespace avmoe::train
