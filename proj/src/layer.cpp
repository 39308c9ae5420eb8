#include "avmoe/moe/layer.hpp"

#include "avmoe/core/ops.hpp"
#include "avmoe/moe/losses.hpp"

#include <numeric>

namespace avmoe::moe {

using Mode = MoELayerConfig::Mode;

void MoELayerConfig::validate() const {
  if (d < 1 || h < 1) throw ConfigError("moe: d and h must be positive");
  switch (mode) {
    case Mode::dense_ffn:
      break;
    case Mode::sparse_topk:
      if (n_experts < 1 || k < 1 || k > n_experts)
        throw ConfigError("moe: sparse_topk needs 1 <= k <= n_experts, got k = " + std::to_string(k) +
                          ", n = " + std::to_string(n_experts));
      break;
    case Mode::hard:
      if (n_per_group < 1 || k < 1 || k > n_per_group)
        throw ConfigError("moe: hard mode needs 1 <= k <= n_per_group");
      if (k % 2 != 0) throw ConfigError("moe: hard mode needs an even k for audio-visual tokens");
      if (!(audio_weight >= 0.0 && audio_weight <= 1.0)) throw ConfigError("moe: audio_weight must lie in [0, 1]");
      break;
    case Mode::hierarchical:
      if (groups < 1 || n_per_group < 1) throw ConfigError("moe: hierarchical mode needs positive group sizes");
      if (m < 1 || m > groups)
        throw ConfigError("moe: m = " + std::to_string(m) + " exceeds G = " + std::to_string(groups));
      if (k_per_group < 1 || k_per_group > n_per_group) throw ConfigError("moe: k_per_group must lie in [1, n_per_group]");
      break;
  }
}

int MoELayerConfig::total_experts() const {
  switch (mode) {
    case Mode::dense_ffn: return 1;
    case Mode::sparse_topk: return n_experts;
    case Mode::hard: return 2 * n_per_group;
    case Mode::hierarchical: return groups * n_per_group;
  }
  return 0;
}

int MoELayerConfig::active_experts() const {
  switch (mode) {
    case Mode::dense_ffn: return 1;
    case Mode::sparse_topk:
    case Mode::hard: return k;
    case Mode::hierarchical: return m * k_per_group;
  }
  return 0;
}

RoutingMode MoELayerConfig::routing_mode() const {
  if (mode == Mode::hard) return RoutingMode::hard;
  if (mode == Mode::hierarchical) return RoutingMode::hierarchical;
  return RoutingMode::sparse;
}

const char* mode_name(Mode mode) {
  switch (mode) {
    case Mode::dense_ffn: return "dense_ffn";
    case Mode::sparse_topk: return "sparse_topk";
    case Mode::hard: return "hard";
    case Mode::hierarchical: return "hierarchical";
  }
  return "?";
}

Mode parse_mode(const std::string& name) {
  for (Mode m : {Mode::dense_ffn, Mode::sparse_topk, Mode::hard, Mode::hierarchical})
    if (name == mode_name(m)) return m;
  throw ConfigError("unknown moe mode '" + name + "'");
}

void ExpertCounter::add(int expert, long long tokens) {
  if (static_cast<std::size_t>(expert) >= calls.size()) calls.resize(static_cast<std::size_t>(expert) + 1, 0);
  calls[static_cast<std::size_t>(expert)] += tokens;
}

long long ExpertCounter::total() const { return std::accumulate(calls.begin(), calls.end(), 0LL); }

std::string expert_prefix(const std::string& prefix, int expert) {
  return prefix + "expert" + std::to_string(expert) + ".";
}

namespace {

void add_expert(ParameterStore& store, const std::string& p, int d, int h, Rng& rng) {
  store.add(p + "w1", rng.normal_matrix(d, h, 1.0 / std::sqrt(double(d))));
  store.add(p + "b1", Matrix::Zero(1, h));
  store.add(p + "w2", rng.normal_matrix(h, d, 1.0 / std::sqrt(double(h))));
  store.add(p + "b2", Matrix::Zero(1, d));
}

Var param(Tape& tape, ParameterStore& store, const std::string& name) { return tape.parameter(store.at(name)); }

/// Rows gathered for one expert and where its combine weights live.
struct ExpertSlot {
  int block = 0;
  std::vector<int> rows;
  std::vector<std::pair<int, int>> entries;
};

Var combine(Tape& tape, ParameterStore& store, const std::string& prefix, const MoELayerConfig& cfg, Var x,
            const std::vector<Var>& blocks, const std::vector<ExpertSlot>& slots, ExpertCounter* counter) {
  std::vector<Var> parts;
  std::vector<std::vector<int>> rows;
  for (std::size_t e = 0; e < slots.size(); ++e) {
    const ExpertSlot& s = slots[e];
    if (s.rows.empty()) continue;
    Var out = expert_forward(tape, store, expert_prefix(prefix, static_cast<int>(e)), ops::gather_rows(x, s.rows),
                             cfg.activation);
    Var w = ops::gather_entries(blocks[static_cast<std::size_t>(s.block)], s.entries);
    parts.push_back(ops::scale_rows(out, w));
    rows.push_back(s.rows);
    if (counter) counter->add(static_cast<int>(e), static_cast<long long>(s.rows.size()));
  }
  if (parts.empty()) return tape.constant(Matrix::Zero(x.rows(), x.cols()));
  return ops::scatter_add_rows(x.rows(), parts, rows);
}

std::vector<int> rows_where(const std::vector<Modality>& modalities, std::initializer_list<Modality> keep) {
  std::vector<int> rows;
  for (std::size_t t = 0; t < modalities.size(); ++t)
    for (Modality m : keep)
      if (modalities[t] == m) rows.push_back(static_cast<int>(t));
  return rows;
}

Var zero_scalar(Tape& tape) { return tape.constant(Matrix::Zero(1, 1)); }

}  // namespace

void init_moe_layer(ParameterStore& store, const std::string& prefix, const MoELayerConfig& cfg, Rng& rng,
                    double router_std) {
  cfg.validate();
  if (cfg.mode == Mode::dense_ffn) {
    add_expert(store, prefix + "ffn.", cfg.d, cfg.h, rng);
    return;
  }
  for (int e = 0; e < cfg.total_experts(); ++e) add_expert(store, expert_prefix(prefix, e), cfg.d, cfg.h, rng);
  switch (cfg.mode) {
    case Mode::sparse_topk:
      store.add(prefix + "router", rng.normal_matrix(cfg.d, cfg.n_experts, router_std));
      break;
    case Mode::hard:
      store.add(prefix + "router_audio", rng.normal_matrix(cfg.d, cfg.n_per_group, router_std));
      store.add(prefix + "router_video", rng.normal_matrix(cfg.d, cfg.n_per_group, router_std));
      break;
    case Mode::hierarchical:
      store.add(prefix + "router_inter", rng.normal_matrix(cfg.d, cfg.groups, router_std));
      for (int g = 0; g < cfg.groups; ++g)
        store.add(prefix + "router_intra" + std::to_string(g), rng.normal_matrix(cfg.d, cfg.n_per_group, router_std));
      break;
    case Mode::dense_ffn:
      break;
  }
}

Var expert_forward(Tape& tape, ParameterStore& store, const std::string& expert, Var x, Activation activation) {
  Var w1 = param(tape, store, expert + "w1");
  if (x.cols() != w1.rows())
    throw DimensionError("expert_forward: input " + shape_string(x.value()) + " vs w1 " + shape_string(w1.value()));
  Var hidden = ops::add_row(ops::matmul(x, w1), param(tape, store, expert + "b1"));
  if (activation == Activation::gelu_tanh) hidden = ops::gelu(hidden);
  return ops::add_row(ops::matmul(hidden, param(tape, store, expert + "w2")), param(tape, store, expert + "b2"));
}

MoEOutput moe_forward(Tape& tape, ParameterStore& store, const std::string& prefix, const MoELayerConfig& cfg, Var x,
                      const std::vector<Modality>& modalities, ExpertCounter* counter) {
  cfg.validate();
  const Index N = x.rows();
  if (static_cast<Index>(modalities.size()) != N)
    throw DimensionError("moe_forward: " + std::to_string(modalities.size()) + " modality tags for " +
                         std::to_string(N) + " tokens");
  MoEOutput out;
  out.balance = out.biasing = out.z = zero_scalar(tape);
  if (cfg.mode == Mode::dense_ffn) {
    out.y = expert_forward(tape, store, prefix + "ffn.", x, cfg.activation);
    if (counter) counter->add(0, N);
    return out;
  }

  auto router = [&](const std::string& name) {
    Var logits = ops::matmul(x, param(tape, store, prefix + name));
    return std::pair{logits, ops::softmax_rows(logits)};
  };
  auto prob_row = [](Var probs, Index t) -> RowVector { return probs.value().row(t); };
  std::vector<Var> blocks;
  std::vector<ExpertSlot> slots(static_cast<std::size_t>(cfg.total_experts()));

  if (cfg.mode == Mode::sparse_topk) {
    auto [logits, probs] = router("router");
    std::vector<std::vector<int>> cols;
    for (Index t = 0; t < N; ++t) {
      out.decisions.push_back(decide_sparse(prob_row(probs, t), cfg.k));
      cols.push_back(out.decisions.back().experts);
      for (std::size_t s = 0; s < cols.back().size(); ++s) {
        ExpertSlot& slot = slots[static_cast<std::size_t>(cols.back()[s])];
        slot.rows.push_back(static_cast<int>(t));
        slot.entries.emplace_back(static_cast<int>(t), static_cast<int>(s));
      }
    }
    blocks.push_back(ops::normalize_selected(probs, cols));
    out.y = combine(tape, store, prefix, cfg, x, blocks, slots, counter);
    out.stats = dispatch_stats(out.decisions, modalities, RoutingMode::sparse, 1);
    out.balance = load_balancing_loss(out.stats.f[0], ops::col_mean(probs));
    if (cfg.z_loss_intra) out.z = router_z_loss(logits);
    return out;
  }

  if (cfg.mode == Mode::hard) {
    auto [logits_a, probs_a] = router("router_audio");
    auto [logits_v, probs_v] = router("router_video");
    const int n = cfg.n_per_group;
    // One weight block per group over the tokens routed through that group.
    std::vector<int> rows[2];
    std::vector<std::vector<int>> cols[2];
    std::vector<double> scale[2];
    for (Index t = 0; t < N; ++t) {
      const Modality mod = modalities[static_cast<std::size_t>(t)];
      out.decisions.push_back(
          decide_hard(mod, prob_row(probs_a, t), prob_row(probs_v, t), cfg.k, cfg.audio_weight));
      const RoutingDecision& d = out.decisions.back();
      for (int g = 0; g < 2; ++g) {
        std::vector<int> local;
        for (int e : d.experts)
          if (e / n == g) local.push_back(e % n);
        if (local.empty()) continue;
        const int r = static_cast<int>(rows[g].size());
        rows[g].push_back(static_cast<int>(t));
        cols[g].push_back(local);
        scale[g].push_back(mod != Modality::audiovisual ? 1.0 : g == 0 ? cfg.audio_weight : 1.0 - cfg.audio_weight);
        for (std::size_t s = 0; s < local.size(); ++s) {
          ExpertSlot& slot = slots[static_cast<std::size_t>(g * n + local[s])];
          slot.block = g;
          slot.rows.push_back(static_cast<int>(t));
          slot.entries.emplace_back(r, static_cast<int>(s));
        }
      }
    }
    Var probs[2] = {probs_a, probs_v};
    for (int g = 0; g < 2; ++g) {
      if (rows[g].empty()) {
        blocks.push_back(tape.constant(Matrix::Zero(1, 1)));
        continue;
      }
      Matrix w = Eigen::Map<const Matrix>(scale[g].data(), static_cast<Index>(scale[g].size()), 1);
      blocks.push_back(ops::scale_rows(ops::normalize_selected(ops::gather_rows(probs[g], rows[g]), cols[g]),
                                       tape.constant(w)));
    }
    out.y = combine(tape, store, prefix, cfg, x, blocks, slots, counter);
    out.stats = dispatch_stats(out.decisions, modalities, RoutingMode::hard, 2);
    const std::vector<int> routed[2] = {rows_where(modalities, {Modality::audio, Modality::audiovisual}),
                                        rows_where(modalities, {Modality::video, Modality::audiovisual})};
    for (int g = 0; g < 2; ++g)
      if (!routed[g].empty())
        out.balance = ops::add(out.balance, load_balancing_loss(out.stats.f[static_cast<std::size_t>(g)],
                                                                ops::col_mean(ops::gather_rows(probs[g], routed[g]))));
    if (cfg.z_loss_intra) out.z = ops::add(router_z_loss(logits_a), router_z_loss(logits_v));
    return out;
  }

  // Hierarchical.
  const int G = cfg.groups;
  const int n = cfg.n_per_group;
  auto [inter_logits, q] = router("router_inter");
  std::vector<Var> intra_logits, intra_probs;
  for (int g = 0; g < G; ++g) {
    auto [l, p] = router("router_intra" + std::to_string(g));
    intra_logits.push_back(l);
    intra_probs.push_back(p);
  }
  std::vector<std::vector<int>> group_cols;
  std::vector<std::vector<int>> group_rows(static_cast<std::size_t>(G));
  std::vector<std::vector<std::pair<int, int>>> group_q_entries(static_cast<std::size_t>(G));
  std::vector<std::vector<std::vector<int>>> local_cols(static_cast<std::size_t>(G));
  for (Index t = 0; t < N; ++t) {
    std::vector<RowVector> p;
    for (int g = 0; g < G; ++g) p.push_back(prob_row(intra_probs[static_cast<std::size_t>(g)], t));
    out.decisions.push_back(decide_hierarchical(prob_row(q, t), p, cfg.m, cfg.k_per_group));
    const RoutingDecision& d = out.decisions.back();
    group_cols.push_back(d.groups);
    for (std::size_t s = 0; s < d.groups.size(); ++s) {
      const int g = d.groups[s];
      if (cfg.k_per_group == 1) {
        ExpertSlot& slot = slots[static_cast<std::size_t>(d.group_argmax[s])];
        slot.rows.push_back(static_cast<int>(t));
        slot.entries.emplace_back(static_cast<int>(t), static_cast<int>(s));
        continue;
      }
      auto& grows = group_rows[static_cast<std::size_t>(g)];
      const int r = static_cast<int>(grows.size());
      grows.push_back(static_cast<int>(t));
      group_q_entries[static_cast<std::size_t>(g)].emplace_back(static_cast<int>(t), static_cast<int>(s));
      std::vector<int> local;
      for (int i = 0; i < cfg.k_per_group; ++i) {
        const int e = d.experts[s * std::size_t(cfg.k_per_group) + std::size_t(i)];
        local.push_back(e - g * n);
        ExpertSlot& slot = slots[static_cast<std::size_t>(e)];
        slot.block = 1 + g;
        slot.rows.push_back(static_cast<int>(t));
        slot.entries.emplace_back(r, i);
      }
      local_cols[static_cast<std::size_t>(g)].push_back(std::move(local));
    }
  }
  Var q_tilde = ops::normalize_selected(q, group_cols);
  blocks.push_back(q_tilde);
  if (cfg.k_per_group > 1) {
    for (int g = 0; g < G; ++g) {
      const auto& grows = group_rows[static_cast<std::size_t>(g)];
      if (grows.empty()) {
        blocks.push_back(tape.constant(Matrix::Zero(1, 1)));
        continue;
      }
      Var p_tilde = ops::normalize_selected(ops::gather_rows(intra_probs[static_cast<std::size_t>(g)], grows),
                                            local_cols[static_cast<std::size_t>(g)]);
      blocks.push_back(ops::scale_rows(p_tilde, ops::gather_entries(q_tilde, group_q_entries[static_cast<std::size_t>(g)])));
    }
  }
  out.y = combine(tape, store, prefix, cfg, x, blocks, slots, counter);
  out.stats = dispatch_stats(out.decisions, modalities, RoutingMode::hierarchical, G);
  for (int g = 0; g < G; ++g)
    out.balance = ops::add(out.balance, load_balancing_loss(out.stats.f[static_cast<std::size_t>(g)],
                                                            ops::col_mean(intra_probs[static_cast<std::size_t>(g)])));
  if (G == 2) {
    const std::vector<int> audio_rows = rows_where(modalities, {Modality::audio});
    const std::vector<int> video_rows = rows_where(modalities, {Modality::video});
    Var Q_audio = audio_rows.empty() ? Var() : ops::col_mean(ops::gather_rows(q, audio_rows));
    Var Q_video = video_rows.empty() ? Var() : ops::col_mean(ops::gather_rows(q, video_rows));
    out.biasing = load_biasing_loss(tape, out.stats, Q_audio, Q_video);
  }
  if (cfg.z_loss_inter) out.z = ops::add(out.z, router_z_loss(inter_logits));
  if (cfg.z_loss_intra)
    for (Var l : intra_logits) out.z = ops::add(out.z, router_z_loss(l));
  return out;
}

Var moe_combine(Tape& tape, ParameterStore& store, const std::string& prefix, const MoELayerConfig& cfg, Var x,
                const std::vector<RoutingDecision>& decisions, ExpertCounter* counter) {
  cfg.validate();
  if (cfg.mode == Mode::dense_ffn) throw ConfigError("moe_combine: dense_ffn layers take no routing decisions");
  if (static_cast<Index>(decisions.size()) != x.rows())
    throw DimensionError("moe_combine: " + std::to_string(decisions.size()) + " decisions for " +
                         std::to_string(x.rows()) + " tokens");
  const bool hierarchical = cfg.mode == Mode::hierarchical;
  std::size_t width = 1;
  for (const RoutingDecision& d : decisions) {
    if ((d.group_probs.size() > 0) != hierarchical)
      throw ConfigError(std::string("moe_combine: decision does not match layer mode ") + mode_name(cfg.mode));
    width = std::max(width, d.experts.size());
  }
  Matrix w = Matrix::Zero(x.rows(), static_cast<Index>(width));
  std::vector<ExpertSlot> slots(static_cast<std::size_t>(cfg.total_experts()));
  for (std::size_t t = 0; t < decisions.size(); ++t) {
    const RoutingDecision& d = decisions[t];
    for (std::size_t s = 0; s < d.experts.size(); ++s) {
      if (d.experts[s] < 0 || d.experts[s] >= cfg.total_experts())
        throw ConfigError("moe_combine: expert id " + std::to_string(d.experts[s]) + " outside the layer");
      w(static_cast<Index>(t), static_cast<Index>(s)) = d.weights[s];
      ExpertSlot& slot = slots[static_cast<std::size_t>(d.experts[s])];
      slot.rows.push_back(static_cast<int>(t));
      slot.entries.emplace_back(static_cast<int>(t), static_cast<int>(s));
    }
  }
  return combine(tape, store, prefix, cfg, x, {tape.constant(w)}, slots, counter);
}

FlopsReport flops_report(const MoELayerConfig& cfg, long long tokens) {
  cfg.validate();
  if (tokens < 1) throw PreconditionError("flops_report: tokens must be positive");
  const double per_expert = 2.0 * cfg.d * cfg.h * 2.0;
  double router = 0.0;
  switch (cfg.mode) {
    case Mode::dense_ffn: break;
    case Mode::sparse_topk: router = 2.0 * cfg.d * cfg.n_experts; break;
    case Mode::hard: router = 2.0 * cfg.d * 2 * cfg.n_per_group; break;
    case Mode::hierarchical: router = 2.0 * cfg.d * (cfg.groups + cfg.groups * cfg.n_per_group); break;
  }
  FlopsReport r;
  r.dense_ffn = per_expert * double(tokens);
  r.activated = (cfg.active_experts() * per_expert + router) * double(tokens);
  r.total_param = (cfg.total_experts() * per_expert + router) * double(tokens);
  r.ratio = r.activated / r.dense_ffn;
  return r;
}

ParamReport param_report(const MoELayerConfig& cfg) {
  cfg.validate();
  ParamReport r;
  r.per_expert = 2LL * cfg.d * cfg.h + cfg.h + cfg.d;
  r.total_ffn = r.per_expert * cfg.total_experts();
  r.activated_ffn = r.per_expert * cfg.active_experts();
  switch (cfg.mode) {
    case Mode::dense_ffn: break;
    case Mode::sparse_topk: r.router = 1LL * cfg.d * cfg.n_experts; break;
    case Mode::hard: r.router = 2LL * cfg.d * cfg.n_per_group; break;
    case Mode::hierarchical: r.router = 1LL * cfg.d * (cfg.groups + cfg.groups * cfg.n_per_group); break;
  }
  return r;
}

}  // namespace avmoe::moe
