#include "avmoe/moe/losses.hpp"

#include "avmoe/core/kernels.hpp"
#include "avmoe/core/ops.hpp"

namespace avmoe::moe {

double load_balancing_loss(const RowVector& f, const RowVector& P) {
  if (f.size() != P.size() || f.size() == 0)
    throw DimensionError("load_balancing_loss: f has " + std::to_string(f.size()) + " entries, P has " +
                         std::to_string(P.size()));
  return double(f.size()) * f.dot(P);
}

Var load_balancing_loss(const RowVector& f, Var P) {
  if (P.rows() != 1 || P.cols() != f.size())
    throw DimensionError("load_balancing_loss: f has " + std::to_string(f.size()) + " entries, P is " +
                         shape_string(P.value()));
  return ops::weighted_sum(P, Matrix(double(f.size()) * f));
}

double load_balancing_loss(const DispatchStats& stats) {
  double total = 0.0;
  for (std::size_t g = 0; g < stats.f.size(); ++g)
    if (stats.group_tokens[g] > 0) total += load_balancing_loss(stats.f[g], stats.P[g]);
  return total;
}

double router_z_loss(const Matrix& logits) {
  if (logits.rows() == 0) return 0.0;
  return kernels::logsumexp_rows(logits).array().square().mean();
}

Var router_z_loss(Var logits) { return ops::mean(ops::square(ops::logsumexp_rows(logits))); }

namespace {

void require_two_groups(const DispatchStats& stats) {
  if (stats.g_audio.size() != 2 || stats.g_video.size() != 2)
    throw ConfigError("load_biasing_loss: needs exactly 2 expert groups, got " + std::to_string(stats.g_audio.size()));
}

}  // namespace

double load_biasing_loss(const DispatchStats& stats) {
  require_two_groups(stats);
  double total = 0.0;
  if (stats.n_audio > 0) total += 1.0 - stats.g_audio(0) * stats.Q_audio(0);
  if (stats.n_video > 0) total += 1.0 - stats.g_video(1) * stats.Q_video(1);
  return total;
}

Var load_biasing_loss(Tape& tape, const DispatchStats& stats, Var Q_audio, Var Q_video) {
  require_two_groups(stats);
  Var total = tape.constant(Matrix::Zero(1, 1));
  auto term = [&](Var Q, double g, int group) {
    Matrix coeff = Matrix::Zero(1, 2);
    coeff(0, group) = -g;
    return ops::add_constant(ops::weighted_sum(Q, coeff), Matrix::Ones(1, 1));
  };
  if (stats.n_audio > 0) total = ops::add(total, term(Q_audio, stats.g_audio(0), 0));
  if (stats.n_video > 0) total = ops::add(total, term(Q_video, stats.g_video(1), 1));
  return total;
}

LossBundle total_aux_loss(double ce, double balance, double biasing, double z, const LossCoefficients& coeffs) {
  LossBundle b{ce, balance, biasing, z, coeffs, 0.0};
  b.total = ce + coeffs.balance * balance + coeffs.biasing * biasing + coeffs.z * z;
  return b;
}

}  // namespace avmoe::moe
