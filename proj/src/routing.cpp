#include "avmoe/moe/routing.hpp"

#include "avmoe/core/kernels.hpp"

#include <algorithm>
#include <numeric>

namespace avmoe::moe {

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::audio: return "audio";
    case Modality::video: return "video";
    case Modality::audiovisual: return "audiovisual";
  }
  return "?";
}

Matrix route_dense(const RouterParams& router, const Matrix& x) {
  if (x.cols() != router.weight.rows())
    throw DimensionError("route_dense: tokens " + shape_string(x) + " vs router " + shape_string(router.weight));
  return kernels::softmax_rows(Matrix(x * router.weight));
}

RowVector route_dense(const RouterParams& router, const RowVector& x) {
  return route_dense(router, Matrix(x)).row(0);
}

TopK select_topk(const RowVector& probs, int k) {
  const int n = static_cast<int>(probs.size());
  if (k < 1 || k > n)
    throw PreconditionError("select_topk: k = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs(a) > probs(b); });
  TopK out;
  out.ids.assign(order.begin(), order.begin() + k);
  double total = 0.0;
  for (int id : out.ids) total += probs(id);
  for (int id : out.ids) out.weights.push_back(probs(id) / total);
  return out;
}

int argmax(const RowVector& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return static_cast<int>(best);
}

RoutingDecision decide_sparse(const RowVector& probs, int k) {
  RoutingDecision d;
  d.expert_probs = probs;
  TopK top = select_topk(probs, k);
  d.experts = std::move(top.ids);
  d.weights = std::move(top.weights);
  return d;
}

RoutingDecision decide_hard(Modality modality, const RowVector& audio_probs,
                            const RowVector& video_probs, int k, double audio_weight) {
  if (audio_probs.size() != video_probs.size())
    throw DimensionError("decide_hard: groups must have equal size");
  if (!(audio_weight >= 0.0 && audio_weight <= 1.0))
    throw PreconditionError("decide_hard: audio_weight must lie in [0, 1]");
  const int n = static_cast<int>(audio_probs.size());
  RoutingDecision d;
  d.expert_probs.resize(2 * n);
  d.expert_probs << audio_probs, video_probs;

  auto take = [&](const RowVector& probs, int count, int offset, double scale) {
    const TopK top = select_topk(probs, count);
    for (std::size_t i = 0; i < top.ids.size(); ++i) {
      d.experts.push_back(top.ids[i] + offset);
      d.weights.push_back(scale * top.weights[i]);
    }
  };
  switch (modality) {
    case Modality::audio:
      take(audio_probs, k, 0, 1.0);
      break;
    case Modality::video:
      take(video_probs, k, n, 1.0);
      break;
    case Modality::audiovisual:
      if (k % 2 != 0) throw PreconditionError("decide_hard: audio-visual tokens need an even k, got " + std::to_string(k));
      take(audio_probs, k / 2, 0, audio_weight);
      take(video_probs, k / 2, n, 1.0 - audio_weight);
      break;
  }
  return d;
}

RoutingDecision decide_hierarchical(const RowVector& group_probs,
                                    const std::vector<RowVector>& intra_probs, int m, int k_per_group) {
  const int G = static_cast<int>(group_probs.size());
  if (static_cast<int>(intra_probs.size()) != G)
    throw DimensionError("decide_hierarchical: " + std::to_string(intra_probs.size()) + " intra routers for " +
                         std::to_string(G) + " groups");
  if (m < 1 || m > G) throw PreconditionError("decide_hierarchical: m = " + std::to_string(m) + " with G = " + std::to_string(G));
  const int n = static_cast<int>(intra_probs.front().size());
  RoutingDecision d;
  d.group_probs = group_probs;
  d.expert_probs.resize(G * n);
  for (int g = 0; g < G; ++g) {
    if (intra_probs[static_cast<std::size_t>(g)].size() != n)
      throw DimensionError("decide_hierarchical: groups must have equal size");
    d.expert_probs.segment(g * n, n) = intra_probs[static_cast<std::size_t>(g)];
  }
  TopK groups = select_topk(group_probs, m);
  d.groups = groups.ids;
  d.group_weights = groups.weights;
  for (std::size_t s = 0; s < d.groups.size(); ++s) {
    const int g = d.groups[s];
    const RowVector& p = intra_probs[static_cast<std::size_t>(g)];
    d.group_argmax.push_back(g * n + argmax(p));
    if (k_per_group == 1) {
      d.experts.push_back(d.group_argmax.back());
      d.weights.push_back(d.group_weights[s]);
    } else {
      const TopK top = select_topk(p, k_per_group);
      for (std::size_t i = 0; i < top.ids.size(); ++i) {
        d.experts.push_back(g * n + top.ids[i]);
        d.weights.push_back(d.group_weights[s] * top.weights[i]);
      }
    }
  }
  return d;
}

RoutingDecision route_hard(Modality modality, const RouterParams& audio_router,
                           const RouterParams& video_router, const RowVector& x, int k, double audio_weight) {
  return decide_hard(modality, route_dense(audio_router, x), route_dense(video_router, x), k, audio_weight);
}

RoutingDecision route_hierarchical(const RouterParams& inter, const std::vector<RouterParams>& intra,
                                   const RowVector& x, int m, int k_per_group) {
  std::vector<RowVector> probs;
  for (const RouterParams& r : intra) probs.push_back(route_dense(r, x));
  return decide_hierarchical(route_dense(inter, x), probs, m, k_per_group);
}

namespace {

struct Accumulator {
  RowVector f, P;
  int count = 0;

  explicit Accumulator(Index n) : f(RowVector::Zero(n)), P(RowVector::Zero(n)) {}

  void add(const RowVector& probs) {
    f(argmax(probs)) += 1.0;
    P += probs;
    ++count;
  }
  void finish() {
    if (count == 0) return;
    f /= double(count);
    P /= double(count);
  }
};

}  // namespace

DispatchStats dispatch_stats(const std::vector<RoutingDecision>& decisions,
                             const std::vector<Modality>& modalities, RoutingMode mode, int groups) {
  if (decisions.empty()) throw PreconditionError("dispatch_stats: empty batch");
  if (decisions.size() != modalities.size())
    throw DimensionError("dispatch_stats: " + std::to_string(decisions.size()) + " decisions vs " +
                         std::to_string(modalities.size()) + " modality tags");
  if (mode == RoutingMode::sparse) groups = 1;
  if (mode == RoutingMode::hard) groups = 2;
  const Index n = decisions.front().expert_probs.size() / groups;

  std::vector<Accumulator> experts(static_cast<std::size_t>(groups), Accumulator(n));
  DispatchStats s;
  const Index G = decisions.front().group_probs.size();
  Accumulator audio(G), video(G), av(G);

  for (std::size_t t = 0; t < decisions.size(); ++t) {
    const RoutingDecision& d = decisions[t];
    const Modality mod = modalities[t];
    if (mod == Modality::audio) ++s.n_audio;
    if (mod == Modality::video) ++s.n_video;
    if (mod == Modality::audiovisual) ++s.n_av;
    for (int g = 0; g < groups; ++g) {
      if (mode == RoutingMode::hard && ((g == 0 && mod == Modality::video) || (g == 1 && mod == Modality::audio)))
        continue;
      experts[static_cast<std::size_t>(g)].add(d.expert_probs.segment(g * n, n));
    }
    if (mode == RoutingMode::hierarchical) {
      Accumulator& target = mod == Modality::audio ? audio : mod == Modality::video ? video : av;
      target.add(d.group_probs);
    }
  }
  for (Accumulator& a : experts) {
    a.finish();
    s.f.push_back(a.f);
    s.P.push_back(a.P);
    s.group_tokens.push_back(a.count);
  }
  if (mode == RoutingMode::hierarchical) {
    for (Accumulator* a : {&audio, &video, &av}) a->finish();
    s.g_audio = audio.f, s.Q_audio = audio.P;
    s.g_video = video.f, s.Q_video = video.P;
    s.g_av = av.f, s.Q_av = av.P;
  }
  return s;
}

RowVector weighted_expert_load(const std::vector<RoutingDecision>& decisions, int n_experts) {
  RowVector load = RowVector::Zero(n_experts);
  if (decisions.empty()) return load;
  for (const RoutingDecision& d : decisions) {
    if (d.group_probs.size() > 0) {
      const Index G = d.group_probs.size();
      const Index n = d.expert_probs.size() / G;
      for (Index g = 0; g < G; ++g) {
        const RowVector p = d.expert_probs.segment(g * n, n);
        load(g * n + argmax(p)) += d.group_probs(g);
      }
    } else {
      for (std::size_t i = 0; i < d.experts.size(); ++i) load(d.experts[i]) += d.weights[i];
    }
  }
  return load / double(decisions.size());
}

}  // namespace avmoe::moe
