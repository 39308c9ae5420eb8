#include "avmoe/check/grad_suite.hpp"

#include "avmoe/core/grad_check.hpp"
#include "avmoe/core/ops.hpp"
#include "avmoe/core/random.hpp"
#include "avmoe/distill/distill.hpp"
#include "avmoe/moe/layer.hpp"
#include "avmoe/moe/losses.hpp"

#include <algorithm>
#include <functional>
#include <map>

namespace avmoe::check {

namespace {

using Inputs = std::span<const Var>;

Matrix random_matrix(Index rows, Index cols, std::uint64_t seed) {
  Rng r(derive_seed(seed, "gradcheck"));
  return r.normal_matrix(rows, cols);
}

// A fixed random projection turns matrix outputs into a scalar.
Var project(Var y, std::uint64_t seed) { return ops::weighted_sum(y, random_matrix(y.rows(), y.cols(), seed + 1000)); }

struct Probe {
  std::vector<std::pair<Index, Index>> shapes;
  ScalarFunction f;
};

std::map<std::string, Probe> core_probes() {
  std::map<std::string, Probe> p;
  p["matmul"] = {{{3, 4}, {4, 2}}, [](Tape&, Inputs v) { return project(ops::matmul(v[0], v[1]), 1); }};
  p["add"] = {{{2, 3}, {2, 3}}, [](Tape&, Inputs v) { return project(ops::add(v[0], v[1]), 2); }};
  p["sub"] = {{{2, 3}, {2, 3}}, [](Tape&, Inputs v) { return project(ops::sub(v[0], v[1]), 3); }};
  p["hadamard"] = {{{2, 3}, {2, 3}}, [](Tape&, Inputs v) { return project(ops::hadamard(v[0], v[1]), 4); }};
  p["scale"] = {{{2, 3}}, [](Tape&, Inputs v) { return project(ops::scale(v[0], -1.7), 5); }};
  p["add_row"] = {{{3, 2}, {1, 2}}, [](Tape&, Inputs v) { return project(ops::add_row(v[0], v[1]), 6); }};
  p["add_constant"] = {{{2, 2}},
                       [](Tape&, Inputs v) { return project(ops::add_constant(v[0], random_matrix(2, 2, 7)), 7); }};
  p["gelu"] = {{{3, 3}}, [](Tape&, Inputs v) { return project(ops::gelu(v[0]), 8); }};
  p["square"] = {{{3, 3}}, [](Tape&, Inputs v) { return project(ops::square(v[0]), 9); }};
  p["sum"] = {{{2, 3}}, [](Tape&, Inputs v) { return ops::sum(ops::square(v[0])); }};
  p["mean"] = {{{2, 3}}, [](Tape&, Inputs v) { return ops::mean(ops::square(v[0])); }};
  p["col_mean"] = {{{4, 3}}, [](Tape&, Inputs v) { return project(ops::col_mean(v[0]), 10); }};
  p["softmax_rows"] = {{{3, 5}}, [](Tape&, Inputs v) { return project(ops::softmax_rows(v[0]), 11); }};
  p["logsumexp_rows"] = {{{3, 5}}, [](Tape&, Inputs v) { return project(ops::logsumexp_rows(v[0]), 12); }};
  p["standardize_rows"] = {{{3, 5}}, [](Tape&, Inputs v) { return project(ops::standardize_rows(v[0]), 13); }};
  p["mse"] = {{{3, 2}, {3, 2}}, [](Tape&, Inputs v) { return ops::mse(v[0], v[1]); }};
  p["cross_entropy"] = {{{3, 4}}, [](Tape&, Inputs v) { return ops::cross_entropy(v[0], {1, 3, 0}); }};
  p["attention"] = {{{4, 3}, {4, 3}, {4, 3}},
                    [](Tape&, Inputs v) { return project(ops::attention(v[0], v[1], v[2]), 14); }};
  p["attention_causal_segments"] = {{{4, 3}, {4, 3}, {4, 3}}, [](Tape&, Inputs v) {
                                      ops::AttentionOptions o{true, 2, 2};
                                      return project(ops::attention(v[0], v[1], v[2], o), 15);
                                    }};
  p["concat_rows"] = {{{2, 3}, {1, 3}}, [](Tape&, Inputs v) { return project(ops::concat_rows({v[0], v[1]}), 16); }};
  p["concat_cols"] = {{{2, 3}, {2, 1}}, [](Tape&, Inputs v) { return project(ops::concat_cols(v[0], v[1]), 17); }};
  p["slice_rows"] = {{{4, 2}}, [](Tape&, Inputs v) { return project(ops::slice_rows(v[0], 1, 2), 18); }};
  p["gather_rows"] = {{{4, 2}}, [](Tape&, Inputs v) { return project(ops::gather_rows(v[0], {3, 0, 3}), 19); }};
  p["scatter_add_rows"] = {{{2, 3}, {1, 3}}, [](Tape&, Inputs v) {
                             return project(ops::scatter_add_rows(4, {v[0], v[1]}, {{0, 2}, {2}}), 20);
                           }};
  p["scale_rows"] = {{{3, 2}, {3, 1}}, [](Tape&, Inputs v) { return project(ops::scale_rows(v[0], v[1]), 21); }};
  p["gather_entries"] = {{{3, 3}}, [](Tape&, Inputs v) {
                           return project(ops::gather_entries(v[0], {{0, 1}, {2, 2}, {0, 1}}), 22);
                         }};
  p["normalize_selected"] = {{{3, 4}}, [](Tape&, Inputs v) {
                               return project(ops::normalize_selected(ops::softmax_rows(v[0]), {{0, 2}, {3}, {1, 2}}),
                                              23);
                             }};
  return p;
}

std::map<std::string, Probe> loss_probes() {
  std::map<std::string, Probe> p;
  // P and Q come out of a softmax router so the gradient path runs through them.
  p["load_balancing_loss"] = {{{5, 3}, {3, 4}}, [](Tape&, Inputs v) {
                                RowVector f(4);
                                f << 0.4, 0.3, 0.2, 0.1;
                                return moe::load_balancing_loss(f, ops::col_mean(ops::softmax_rows(ops::matmul(v[0], v[1]))));
                              }};
  p["load_biasing_loss"] = {{{5, 3}, {3, 2}}, [](Tape& t, Inputs v) {
                              moe::DispatchStats s;
                              s.g_audio = RowVector(2), s.g_video = RowVector(2);
                              s.g_audio << 0.7, 0.3;
                              s.g_video << 0.4, 0.6;
                              s.Q_audio = s.g_audio, s.Q_video = s.g_video;
                              s.n_audio = 3, s.n_video = 2;
                              Var q = ops::softmax_rows(ops::matmul(v[0], v[1]));
                              return moe::load_biasing_loss(t, s, ops::col_mean(ops::gather_rows(q, {0, 1, 2})),
                                                            ops::col_mean(ops::gather_rows(q, {3, 4})));
                            }};
  p["router_z_loss"] = {{{4, 5}}, [](Tape&, Inputs v) { return moe::router_z_loss(ops::scale(v[0], 2.0)); }};
  return p;
}

moe::MoELayerConfig small_layer(moe::MoELayerConfig::Mode mode) {
  moe::MoELayerConfig c;
  c.mode = mode;
  c.d = 5;
  c.h = 7;
  c.n_experts = 4;
  c.k = 2;
  c.groups = 2;
  c.n_per_group = 3;
  c.m = 2;
  return c;
}

double max_error(GradCheckResult r) { return r.max_relative_error; }

void run_probes(const std::string& module, const std::map<std::string, Probe>& probes, int seeds, double eps,
                std::vector<GradSuiteEntry>& out) {
  for (const auto& [name, probe] : probes) {
    GradSuiteEntry e{module, name, 0.0, seeds};
    for (int seed = 0; seed < seeds; ++seed) {
      std::vector<Matrix> inputs;
      for (std::size_t i = 0; i < probe.shapes.size(); ++i)
        inputs.push_back(random_matrix(probe.shapes[i].first, probe.shapes[i].second,
                                       std::uint64_t(seed) * 31 + i));
      e.max_error = std::max(e.max_error, max_error(grad_check(probe.f, inputs, eps)));
    }
    out.push_back(e);
  }
}

void run_moe(int seeds, double eps, std::vector<GradSuiteEntry>& out) {
  using Mode = moe::MoELayerConfig::Mode;
  using moe::Modality;
  const std::vector<Modality> mods = {Modality::audio, Modality::audio,       Modality::video,
                                      Modality::video, Modality::audiovisual, Modality::audiovisual};
  GradSuiteEntry expert{"moe", "expert_forward", 0.0, seeds};
  for (int seed = 0; seed < seeds; ++seed) {
    Rng rng(derive_seed(std::uint64_t(seed), "gradcheck-expert"));
    const moe::MoELayerConfig cfg = small_layer(Mode::dense_ffn);
    ParameterStore s;
    moe::init_moe_layer(s, "l.", cfg, rng);
    const Matrix x = rng.normal_matrix(4, cfg.d);
    expert.max_error = std::max(
        expert.max_error,
        max_error(grad_check_parameters(
            [&](Tape& t) { return project(moe::expert_forward(t, s, "l.ffn.", t.constant(x)), std::uint64_t(seed)); },
            s, eps)));
    expert.max_error = std::max(expert.max_error,
                                grad_check([&](Tape& t, Var xv) { return project(moe::expert_forward(t, s, "l.ffn.", xv), 3); },
                                           x, eps));
  }
  out.push_back(expert);

  for (Mode mode : {Mode::dense_ffn, Mode::sparse_topk, Mode::hard, Mode::hierarchical}) {
    GradSuiteEntry e{"moe", std::string("moe_forward/") + moe::mode_name(mode), 0.0, seeds};
    for (int seed = 0; seed < seeds; ++seed) {
      Rng rng(derive_seed(std::uint64_t(seed), "gradcheck-moe"));
      const moe::MoELayerConfig cfg = small_layer(mode);
      ParameterStore s;
      moe::init_moe_layer(s, "l.", cfg, rng, 0.5);
      const Matrix x = rng.normal_matrix(6, cfg.d);
      const Matrix target = rng.normal_matrix(6, cfg.d);
      auto loss = [&](Tape& t, Var xv) {
        moe::MoEOutput o = moe::moe_forward(t, s, "l.", cfg, xv, mods);
        Var l = ops::mse(o.y, target);
        l = ops::add(l, ops::scale(o.balance, 0.1));
        l = ops::add(l, ops::scale(o.biasing, 0.1));
        return ops::add(l, ops::scale(o.z, 0.01));
      };
      e.max_error = std::max(e.max_error,
                             max_error(grad_check_parameters([&](Tape& t) { return loss(t, t.constant(x)); }, s, eps)));
      e.max_error = std::max(e.max_error, grad_check(loss, x, eps));
    }
    out.push_back(e);
  }
}

void run_distill(int seeds, double eps, std::vector<GradSuiteEntry>& out) {
  GradSuiteEntry masked{"distill", "masked_prediction_loss", 0.0, seeds};
  GradSuiteEntry mlm{"distill", "mlm_loss", 0.0, seeds};
  for (int seed = 0; seed < seeds; ++seed) {
    Rng rng(derive_seed(std::uint64_t(seed), "gradcheck-distill"));
    ParameterStore s;
    distill::init_heads(s, 4, {"acp"}, 3, rng);
    for (auto& [name, p] : s) p.value += rng.normal_matrix(p.value.rows(), p.value.cols(), 0.3);
    const Matrix x = rng.normal_matrix(5, 4), target = rng.normal_matrix(5, 4);
    const Matrix centroids = random_orthonormal(3, 4, rng);
    const IndexSet rows = {0, 2, 3};
    masked.max_error = std::max(masked.max_error, grad_check(
                                                      [&](Tape& t, Var xv) {
                                                        return distill::masked_prediction_loss(
                                                            distill::apply_head(t, s, "acp", xv), target, rows);
                                                      },
                                                      x, eps));
    masked.max_error = std::max(masked.max_error, max_error(grad_check_parameters(
                                                      [&](Tape& t) {
                                                        return distill::masked_prediction_loss(
                                                            distill::apply_head(t, s, "acp", t.constant(x)), target,
                                                            rows);
                                                      },
                                                      s, eps, {"head.acp."})));
    mlm.max_error = std::max(mlm.max_error, grad_check(
                                                [&](Tape& t, Var xv) {
                                                  return distill::mlm_loss(t, s, xv, centroids, target, rows);
                                                },
                                                x, eps));
  }
  out.push_back(masked);
  out.push_back(mlm);
}

}  // namespace

std::vector<std::string> grad_suite_modules() { return {"core", "losses", "moe", "distill"}; }

std::vector<GradSuiteEntry> run_grad_suite(const std::string& module, int seeds, double eps) {
  const std::vector<std::string> known = grad_suite_modules();
  if (!module.empty() && std::find(known.begin(), known.end(), module) == known.end())
    throw ConfigError("gradcheck: unknown module '" + module + "'");
  if (seeds < 1) throw ConfigError("gradcheck: seeds must be positive");
  std::vector<GradSuiteEntry> out;
  auto wanted = [&](const char* m) { return module.empty() || module == m; };
  if (wanted("core")) run_probes("core", core_probes(), seeds, eps, out);
  if (wanted("losses")) run_probes("losses", loss_probes(), seeds, eps, out);
  if (wanted("moe")) run_moe(seeds, eps, out);
  if (wanted("distill")) run_distill(seeds, eps, out);
  return out;
}

}  // namespace avmoe::check
