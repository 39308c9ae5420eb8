#pragma once

#include "avmoe/core/random.hpp"
#include "avmoe/core/tape.hpp"
#include "avmoe/moe/routing.hpp"

#include <string>
#include <vector>

namespace avmoe::moe {

enum class Activation { gelu_tanh, identity };

struct MoELayerConfig {
  enum class Mode { dense_ffn, sparse_topk, hard, hierarchical };

  Mode mode = Mode::hierarchical;
  int d = 32;
  int h = 64;
  int n_experts = 8;    ///< sparse_topk
  int k = 2;            ///< sparse_topk, hard
  int groups = 2;       ///< hierarchical
  int n_per_group = 4;  ///< hard, hierarchical
  int m = 2;            ///< hierarchical
  int k_per_group = 1;  ///< hierarchical
  double audio_weight = 0.5;  ///< hard mode weight of the audio group on AV tokens
  Activation activation = Activation::gelu_tanh;
  bool z_loss_inter = true;
  bool z_loss_intra = true;

  void validate() const;
  int total_experts() const;
  /// Experts evaluated per token (k, or m * k_per_group).
  int active_experts() const;
  RoutingMode routing_mode() const;
};

const char* mode_name(MoELayerConfig::Mode mode);
MoELayerConfig::Mode parse_mode(const std::string& name);

/// Counts expert evaluations, one per (token, expert) pair.
struct ExpertCounter {
  std::vector<long long> calls;

  void add(int expert, long long tokens);
  long long total() const;
};

/// Parameter names: <prefix>expert<i>.{w1,b1,w2,b2}, <prefix>ffn.* in dense
/// mode; routers <prefix>router, <prefix>router_audio / router_video,
/// <prefix>router_inter / router_intra<g>.
std::string expert_prefix(const std::string& prefix, int expert);

void init_moe_layer(ParameterStore& store, const std::string& prefix, const MoELayerConfig& cfg, Rng& rng,
                    double router_std = 0.02);

/// act(x W1 + b1) W2 + b2 over the rows of x.
Var expert_forward(Tape& tape, ParameterStore& store, const std::string& expert, Var x,
                   Activation activation = Activation::gelu_tanh);

struct MoEOutput {
  Var y;
  std::vector<RoutingDecision> decisions;
  DispatchStats stats;
  Var balance;  ///< L_B
  Var biasing;  ///< L_S
  Var z;        ///< L_Z, summed over the router logit sets
};

/// Routes every row of x and combines the selected experts. `modalities`
/// tags each row with the modality condition of its sequence. Only selected
/// experts are evaluated, each on the gathered rows that chose it.
MoEOutput moe_forward(Tape& tape, ParameterStore& store, const std::string& prefix, const MoELayerConfig& cfg,
                      Var x, const std::vector<Modality>& modalities, ExpertCounter* counter = nullptr);

/// Combine step for externally supplied decisions; weights are constants.
Var moe_combine(Tape& tape, ParameterStore& store, const std::string& prefix, const MoELayerConfig& cfg, Var x,
                const std::vector<RoutingDecision>& decisions, ExpertCounter* counter = nullptr);

struct FlopsReport {
  double activated = 0.0;    ///< selected experts plus routers
  double total_param = 0.0;  ///< as if every expert ran on every token
  double dense_ffn = 0.0;
  double ratio = 0.0;        ///< activated / dense_ffn
};

/// Multiply-adds count as 2 operations; activations and biases are ignored.
FlopsReport flops_report(const MoELayerConfig& cfg, long long tokens);

struct ParamReport {
  long long per_expert = 0;
  long long total_ffn = 0;
  long long activated_ffn = 0;
  long long router = 0;
};

ParamReport param_report(const MoELayerConfig& cfg);

/// Reference MFLOPs of a large sparse FFN layer and its dense counterpart.
/// Documentation only; desk-scale ratios are checked against flops_report.
inline constexpr double kReferenceMoeMflops = 921.0;
inline constexpr double kReferenceDenseMflops = 472.0;

}  // namespace avmoe::moe
