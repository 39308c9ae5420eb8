#pragma once

// Value-level numeric kernels. These are templated on the Eigen expression
// type so they accept blocks, maps and extended-precision scalars alike; the
// differentiable ops in ops.hpp are thin wrappers over them.

#include "avmoe/core/types.hpp"

#include <cmath>
#include <numbers>

namespace avmoe::kernels {

/// Row-wise softmax with max subtraction.
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  if (x.cols() == 0) throw PreconditionError("softmax: empty row");
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar peak = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - peak).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename Derived>
RowVectorX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& v) {
  return softmax_rows(v.reshaped(1, v.size()));
}

/// Column vector of per-row log-sum-exp values.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> logsumexp_rows(
    const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  if (x.cols() == 0) throw PreconditionError("logsumexp: empty row");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar peak = x.row(r).maxCoeff();
    out(r) = peak + std::log((x.row(r).array() - peak).exp().sum());
  }
  return out;
}

template <typename Scalar>
Scalar gelu_tanh(Scalar x) {
  const Scalar c = std::sqrt(Scalar(2) / std::numbers::pi_v<Scalar>);
  const Scalar u = c * (x + Scalar(0.044715) * x * x * x);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(u));
}

template <typename Scalar>
Scalar gelu_tanh_derivative(Scalar x) {
  const Scalar c = std::sqrt(Scalar(2) / std::numbers::pi_v<Scalar>);
  const Scalar u = c * (x + Scalar(0.044715) * x * x * x);
  const Scalar t = std::tanh(u);
  return Scalar(0.5) * (Scalar(1) + t) +
         Scalar(0.5) * x * (Scalar(1) - t * t) * c * (Scalar(1) + Scalar(3 * 0.044715) * x * x);
}

/// Zero mean, unit variance across the feature (column) axis of every row.
template <typename Derived>
MatrixX<typename Derived::Scalar> standardize_rows(const Eigen::MatrixBase<Derived>& x,
                                                   typename Derived::Scalar eps) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(x.rows(), x.cols());
  const Scalar n = Scalar(x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).sum() / n;
    const auto centered = (x.row(r).array() - mean).eval();
    const Scalar var = centered.square().sum() / n;
    out.row(r) = (centered / std::sqrt(var + eps)).matrix();
  }
  return out;
}

/// Each row scaled to unit Euclidean norm; zero rows stay zero.
template <typename Derived>
MatrixX<typename Derived::Scalar> normalize_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out = x;
  for (Index r = 0; r < out.rows(); ++r) {
    const Scalar norm = out.row(r).norm();
    if (norm > Scalar(0)) out.row(r) /= norm;
  }
  return out;
}

/// Sinusoidal encoding of (possibly fractional) positions, one row per position.
inline Matrix sinusoidal_positions(const std::vector<double>& positions, Index dim,
                                   double base = 10000.0) {
  Matrix out(static_cast<Index>(positions.size()), dim);
  for (Index p = 0; p < out.rows(); ++p) {
    for (Index i = 0; i < dim; ++i) {
      const double freq = std::pow(base, -2.0 * double(i / 2) / double(dim));
      const double angle = positions[static_cast<std::size_t>(p)] * freq;
      out(p, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return out;
}

}  // namespace avmoe::kernels
