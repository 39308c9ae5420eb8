#pragma once

#include "avmoe/core/tape.hpp"
#include "avmoe/moe/routing.hpp"

namespace avmoe::moe {

/// n * sum_i f_i P_i. f is an indicator statistic (no gradient).
double load_balancing_loss(const RowVector& f, const RowVector& P);
Var load_balancing_loss(const RowVector& f, Var P);

/// Sum of the per-group expressions |E^g| sum f^g P^g.
double load_balancing_loss(const DispatchStats& stats);

/// Mean over rows of logsumexp(logits)^2.
double router_z_loss(const Matrix& logits);
Var router_z_loss(Var logits);

/// (1 - g^A_1 Q^A_1) + (1 - g^V_2 Q^V_2); a term whose token subset is
/// empty contributes 0.
double load_biasing_loss(const DispatchStats& stats);
/// Tape form: Q_audio / Q_video are [1 x 2] mean inter-router probabilities
/// over the audio-only / video-only tokens; pass an invalid Var for an
/// empty subset.
Var load_biasing_loss(Tape& tape, const DispatchStats& stats, Var Q_audio, Var Q_video);

struct LossCoefficients {
  double balance = 1e-2;  ///< c_B
  double biasing = 1e-2;  ///< c_S
  double z = 1e-3;        ///< c_Z
};

struct LossBundle {
  double ce = 0.0;
  double balance = 0.0;
  double biasing = 0.0;
  double z = 0.0;
  LossCoefficients coeffs;
  double total = 0.0;
};

LossBundle total_aux_loss(double ce, double balance, double biasing, double z,
                          const LossCoefficients& coeffs = {});

}  // namespace avmoe::moe
