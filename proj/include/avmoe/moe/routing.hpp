#pragma once

#include "avmoe/core/types.hpp"

#include <vector>

namespace avmoe::moe {

/// Sequence-level input condition; modality dropout decides it per sequence.
enum class Modality { audio, video, audiovisual };

const char* modality_name(Modality m);

enum class RoutingMode { sparse, hard, hierarchical };

/// One column per expert (or per group): logits = x * weight.
struct RouterParams {
  Matrix weight;  ///< d x n_outputs
};

struct TopK {
  std::vector<int> ids;        ///< descending probability, lowest id first on ties
  std::vector<double> weights; ///< renormalized over the selection
};

/// Per-token routing outcome. Expert ids are global: group g owns ids
/// [g * n_per_group, (g + 1) * n_per_group).
struct RoutingDecision {
  RowVector expert_probs;            ///< per group softmaxes side by side
  std::vector<int> experts;          ///< selected experts
  std::vector<double> weights;       ///< combine weight per selected expert, sums to 1
  RowVector group_probs;             ///< q; empty outside hierarchical mode
  std::vector<int> groups;           ///< selected groups
  std::vector<double> group_weights; ///< q~ over selected groups
  std::vector<int> group_argmax;     ///< argmax_j p_i(j) per selected group (global id)
};

/// softmax over experts for each row of x ([N x d] -> [N x n]).
Matrix route_dense(const RouterParams& router, const Matrix& x);
RowVector route_dense(const RouterParams& router, const RowVector& x);

TopK select_topk(const RowVector& probs, int k);
int argmax(const RowVector& v);

/// Decision builders working from already computed probabilities.
RoutingDecision decide_sparse(const RowVector& probs, int k);
RoutingDecision decide_hard(Modality modality, const RowVector& audio_probs,
                            const RowVector& video_probs, int k, double audio_weight = 0.5);
RoutingDecision decide_hierarchical(const RowVector& group_probs,
                                    const std::vector<RowVector>& intra_probs, int m,
                                    int k_per_group = 1);

RoutingDecision route_hard(Modality modality, const RouterParams& audio_router,
                           const RouterParams& video_router, const RowVector& x, int k,
                           double audio_weight = 0.5);
RoutingDecision route_hierarchical(const RouterParams& inter, const std::vector<RouterParams>& intra,
                                   const RowVector& x, int m, int k_per_group = 1);

/// Batch statistics feeding the auxiliary losses.
struct DispatchStats {
  /// Per expert group: top-1 frequency and mean probability of that group's
  /// router over the tokens it is accounted on. One entry for sparse mode.
  std::vector<RowVector> f;
  std::vector<RowVector> P;
  std::vector<int> group_tokens;  ///< tokens behind f[i], P[i]

  /// Inter-router statistics per unimodal subset; empty outside hierarchical mode.
  RowVector g_audio, Q_audio;  ///< over tokens of audio-only sequences
  RowVector g_video, Q_video;  ///< over tokens of video-only sequences
  RowVector g_av, Q_av;        ///< audio-visual tokens, reported only

  int n_audio = 0;
  int n_video = 0;
  int n_av = 0;
};

/// Statistics from decisions. In hierarchical mode f/P cover every group's
/// intra router over all tokens; in hard mode each group's router counts the
/// tokens routed through it (its own modality plus audio-visual tokens).
DispatchStats dispatch_stats(const std::vector<RoutingDecision>& decisions,
                             const std::vector<Modality>& modalities, RoutingMode mode, int groups);

/// sum over tokens of q_i * [j = argmax p_i], normalized by token count;
/// outside hierarchical mode, plain selection frequencies weighted by the
/// combine weights.
RowVector weighted_expert_load(const std::vector<RoutingDecision>& decisions, int n_experts);

}  // namespace avmoe::moe
