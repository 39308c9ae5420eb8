#include "avmoe/core/ops.hpp"

#include "avmoe/core/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace avmoe::ops {
namespace {

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a) + " and " +
                         shape_string(b) + " differ");
}

void require_same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw PreconditionError("operands live on different tapes");
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner extents differ, " + shape_string(a.value()) + " x " +
                         shape_string(b.value()));
  Matrix out = a.value() * b.value();
  return a.tape().push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.needs_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("add", a.value(), b.value());
  return a.tape().push(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("sub", a.value(), b.value());
  return a.tape().push(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var hadamard(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("hadamard", a.value(), b.value());
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape().push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.needs_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var scale(Var a, double factor) {
  return a.tape().push(a.value() * factor, {a},
                       [a, factor](Tape& t, const Matrix& g) { t.accumulate(a, g * factor); });
}

Var add_row(Var a, Var bias) {
  require_same_tape(a, bias);
  if (bias.rows() != 1 || bias.cols() != a.cols())
    throw DimensionError("add_row: bias " + shape_string(bias.value()) + " vs input " +
                         shape_string(a.value()));
  Matrix out = a.value().rowwise() + bias.value().row(0);
  return a.tape().push(std::move(out), {a, bias}, [a, bias](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.needs_grad(bias)) t.accumulate(bias, g.colwise().sum());
  });
}

Var add_constant(Var a, const Matrix& c) {
  require_same_shape("add_constant", a.value(), c);
  return a.tape().push(a.value() + c, {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

Var gelu(Var a) {
  Matrix out = a.value().unaryExpr([](double x) { return kernels::gelu_tanh(x); });
  return a.tape().push(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    Matrix d = a.value().unaryExpr([](double x) { return kernels::gelu_tanh_derivative(x); });
    t.accumulate(a, g.cwiseProduct(d));
  });
}

Var square(Var a) {
  return a.tape().push(a.value().array().square().matrix(), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, 2.0 * g.cwiseProduct(a.value()));
  });
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().push(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var mean(Var a) {
  if (a.value().size() == 0) throw PreconditionError("mean of empty tensor");
  const double n = double(a.value().size());
  Matrix out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return a.tape().push(std::move(out), {a}, [a, n](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0) / n));
  });
}

Var col_mean(Var a) {
  if (a.rows() == 0) throw PreconditionError("col_mean over zero rows");
  const double n = double(a.rows());
  Matrix out = a.value().colwise().sum() / n;
  return a.tape().push(std::move(out), {a}, [a, n](Tape& t, const Matrix& g) {
    Matrix d = g.replicate(a.rows(), 1) / n;
    t.accumulate(a, d);
  });
}

Var weighted_sum(Var a, const Matrix& c) {
  require_same_shape("weighted_sum", a.value(), c);
  Matrix out(1, 1);
  out(0, 0) = a.value().cwiseProduct(c).sum();
  return a.tape().push(std::move(out), {a},
                       [a, c](Tape& t, const Matrix& g) { t.accumulate(a, c * g(0, 0)); });
}

Var softmax_rows(Var logits) {
  Matrix out = kernels::softmax_rows(logits.value());
  return logits.tape().push(out, {logits}, [logits, y = out](Tape& t, const Matrix& g) {
    Matrix dot = g.cwiseProduct(y).rowwise().sum();
    t.accumulate(logits, y.cwiseProduct(g - dot.replicate(1, y.cols())));
  });
}

Var logsumexp_rows(Var logits) {
  Matrix out = kernels::logsumexp_rows(logits.value());
  return logits.tape().push(std::move(out), {logits}, [logits](Tape& t, const Matrix& g) {
    Matrix p = kernels::softmax_rows(logits.value());
    for (Index r = 0; r < p.rows(); ++r) p.row(r) *= g(r, 0);
    t.accumulate(logits, p);
  });
}

Var standardize_rows(Var a, double eps) {
  Matrix out = kernels::standardize_rows(a.value(), eps);
  return a.tape().push(out, {a}, [a, out, eps](Tape& t, const Matrix& g) {
    const Index n = a.cols();
    Matrix d(a.rows(), n);
    for (Index r = 0; r < a.rows(); ++r) {
      const double mean = a.value().row(r).sum() / double(n);
      const double var = (a.value().row(r).array() - mean).square().sum() / double(n);
      const double inv_std = 1.0 / std::sqrt(var + eps);
      const double g_mean = g.row(r).sum() / double(n);
      const double gy_mean = g.row(r).cwiseProduct(out.row(r)).sum() / double(n);
      d.row(r) = inv_std * (g.row(r).array() - g_mean - out.row(r).array() * gy_mean).matrix();
    }
    t.accumulate(a, d);
  });
}

Var mse(Var pred, Var target) {
  require_same_tape(pred, target);
  require_same_shape("mse", pred.value(), target.value());
  if (pred.value().size() == 0) throw PreconditionError("mse of empty tensors");
  const double n = double(pred.value().size());
  Matrix out(1, 1);
  out(0, 0) = (pred.value() - target.value()).squaredNorm() / n;
  return pred.tape().push(std::move(out), {pred, target},
                          [pred, target, n](Tape& t, const Matrix& g) {
                            Matrix d = (pred.value() - target.value()) * (2.0 * g(0, 0) / n);
                            t.accumulate(pred, d);
                            if (t.needs_grad(target)) t.accumulate(target, -d);
                          });
}

Var mse(Var pred, const Matrix& target) { return mse(pred, pred.tape().constant(target)); }

Var cross_entropy(Var logits, const std::vector<int>& targets) {
  if (static_cast<Index>(targets.size()) != logits.rows())
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(logits.rows()) + " rows");
  if (logits.rows() == 0) throw PreconditionError("cross_entropy over zero rows");
  for (int id : targets) {
    if (id < 0 || id >= logits.cols())
      throw IndexError("cross_entropy: target " + std::to_string(id) + " outside [0, " +
                       std::to_string(logits.cols()) + ")");
  }
  const auto lse = kernels::logsumexp_rows(logits.value());
  double total = 0.0;
  for (Index r = 0; r < logits.rows(); ++r) total += lse(r) - logits.value()(r, targets[r]);
  const double n = double(logits.rows());
  Matrix out(1, 1);
  out(0, 0) = total / n;
  return logits.tape().push(std::move(out), {logits}, [logits, targets, n](Tape& t, const Matrix& g) {
    Matrix d = kernels::softmax_rows(logits.value());
    for (Index r = 0; r < d.rows(); ++r) d(r, targets[r]) -= 1.0;
    t.accumulate(logits, d * (g(0, 0) / n));
  });
}

Var attention(Var q, Var k, Var v, const AttentionOptions& options) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  const Index dim = q.cols();
  if (dim == 0) throw PreconditionError("attention: feature dimension is 0");
  if (k.cols() != dim || v.cols() != dim)
    throw DimensionError("attention: feature widths differ, Q " + shape_string(q.value()) + ", K " +
                         shape_string(k.value()) + ", V " + shape_string(v.value()));
  if (k.rows() != v.rows())
    throw DimensionError("attention: K " + shape_string(k.value()) + " and V " +
                         shape_string(v.value()) + " row counts differ");
  const Index qs = options.query_segment == 0 ? q.rows() : options.query_segment;
  const Index ks = options.key_segment == 0 ? k.rows() : options.key_segment;
  if (qs == 0 || ks == 0 || q.rows() % qs != 0 || k.rows() % ks != 0 ||
      q.rows() / qs != k.rows() / ks)
    throw DimensionError("attention: segments do not tile Q " + shape_string(q.value()) + " and K " +
                         shape_string(k.value()));
  if (options.causal && qs != ks)
    throw PreconditionError("attention: causal masking needs equal query and key segments");

  const Index segments = q.rows() / qs;
  const double inv_sqrt = 1.0 / std::sqrt(double(dim));
  // Attention probabilities per segment, stacked [segments*qs x ks].
  Matrix probs(q.rows(), ks);
  Matrix out(q.rows(), dim);
  for (Index s = 0; s < segments; ++s) {
    Matrix scores = q.value().middleRows(s * qs, qs) * k.value().middleRows(s * ks, ks).transpose() *
                    inv_sqrt;
    if (options.causal) {
      for (Index i = 0; i < qs; ++i)
        for (Index j = i + 1; j < ks; ++j) scores(i, j) = -std::numeric_limits<double>::infinity();
    }
    probs.middleRows(s * qs, qs) = kernels::softmax_rows(scores);
    out.middleRows(s * qs, qs) = probs.middleRows(s * qs, qs) * v.value().middleRows(s * ks, ks);
  }
  return q.tape().push(
      std::move(out), {q, k, v},
      [q, k, v, probs, qs, ks, segments, inv_sqrt](Tape& t, const Matrix& g) {
        Matrix dq = Matrix::Zero(q.rows(), q.cols());
        Matrix dk = Matrix::Zero(k.rows(), k.cols());
        Matrix dv = Matrix::Zero(v.rows(), v.cols());
        for (Index s = 0; s < segments; ++s) {
          const auto p = probs.middleRows(s * qs, qs);
          const auto gs = g.middleRows(s * qs, qs);
          dv.middleRows(s * ks, ks) = p.transpose() * gs;
          Matrix dp = gs * v.value().middleRows(s * ks, ks).transpose();
          Matrix dot = dp.cwiseProduct(p).rowwise().sum();
          Matrix dscores = p.cwiseProduct(dp - dot.replicate(1, ks)) * inv_sqrt;
          dq.middleRows(s * qs, qs) = dscores * k.value().middleRows(s * ks, ks);
          dk.middleRows(s * ks, ks) = dscores.transpose() * q.value().middleRows(s * qs, qs);
        }
        t.accumulate(q, dq);
        t.accumulate(k, dk);
        t.accumulate(v, dv);
      });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw PreconditionError("concat_rows of nothing");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.cols() != cols)
      throw DimensionError("concat_rows: widths " + std::to_string(cols) + " and " +
                           std::to_string(p.cols()));
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Index offset = 0;
  for (const Var& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
  }
  return parts.front().tape().push(std::move(out), parts, [parts](Tape& t, const Matrix& g) {
    Index offset = 0;
    for (const Var& p : parts) {
      if (t.needs_grad(p)) t.accumulate(p, g.middleRows(offset, p.rows()));
      offset += p.rows();
    }
  });
}

Var concat_cols(Var a, Var b) {
  require_same_tape(a, b);
  if (a.rows() != b.rows())
    throw DimensionError("concat_cols: " + shape_string(a.value()) + " and " + shape_string(b.value()));
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  return a.tape().push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, g.leftCols(a.cols()));
    if (t.needs_grad(b)) t.accumulate(b, g.rightCols(b.cols()));
  });
}

Var slice_rows(Var a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows())
    throw IndexError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_string(a.value()));
  return a.tape().push(a.value().middleRows(start, count), {a},
                       [a, start, count](Tape& t, const Matrix& g) {
                         Matrix d = Matrix::Zero(a.rows(), a.cols());
                         d.middleRows(start, count) = g;
                         t.accumulate(a, d);
                       });
}

Var gather_rows(Var a, const std::vector<int>& rows) {
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows())
      throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " outside " +
                       shape_string(a.value()));
    out.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  return a.tape().push(std::move(out), {a}, [a, rows](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) d.row(rows[i]) += g.row(static_cast<Index>(i));
    t.accumulate(a, d);
  });
}

Var scatter_add_rows(Index n_rows, const std::vector<Var>& parts,
                     const std::vector<std::vector<int>>& rows) {
  if (parts.empty()) throw PreconditionError("scatter_add_rows of nothing");
  if (parts.size() != rows.size()) throw DimensionError("scatter_add_rows: parts/rows size mismatch");
  const Index cols = parts.front().cols();
  Matrix out = Matrix::Zero(n_rows, cols);
  for (std::size_t p = 0; p < parts.size(); ++p) {
    require_same_tape(parts.front(), parts[p]);
    if (parts[p].cols() != cols || parts[p].rows() != static_cast<Index>(rows[p].size()))
      throw DimensionError("scatter_add_rows: part " + std::to_string(p) + " has shape " +
                           shape_string(parts[p].value()));
    for (std::size_t i = 0; i < rows[p].size(); ++i) {
      if (rows[p][i] < 0 || rows[p][i] >= n_rows) throw IndexError("scatter_add_rows: row out of range");
      out.row(rows[p][i]) += parts[p].value().row(static_cast<Index>(i));
    }
  }
  return parts.front().tape().push(std::move(out), parts, [parts, rows](Tape& t, const Matrix& g) {
    for (std::size_t p = 0; p < parts.size(); ++p) {
      if (!t.needs_grad(parts[p])) continue;
      Matrix d(static_cast<Index>(rows[p].size()), g.cols());
      for (std::size_t i = 0; i < rows[p].size(); ++i) d.row(static_cast<Index>(i)) = g.row(rows[p][i]);
      t.accumulate(parts[p], d);
    }
  });
}

Var scale_rows(Var a, Var weights) {
  require_same_tape(a, weights);
  if (weights.cols() != 1 || weights.rows() != a.rows())
    throw DimensionError("scale_rows: weights " + shape_string(weights.value()) + " for input " +
                         shape_string(a.value()));
  Matrix out = a.value();
  for (Index r = 0; r < out.rows(); ++r) out.row(r) *= weights.value()(r, 0);
  return a.tape().push(std::move(out), {a, weights}, [a, weights](Tape& t, const Matrix& g) {
    if (t.needs_grad(a)) {
      Matrix d = g;
      for (Index r = 0; r < d.rows(); ++r) d.row(r) *= weights.value()(r, 0);
      t.accumulate(a, d);
    }
    if (t.needs_grad(weights)) t.accumulate(weights, g.cwiseProduct(a.value()).rowwise().sum());
  });
}

Var gather_entries(Var a, const std::vector<std::pair<int, int>>& entries) {
  Matrix out(static_cast<Index>(entries.size()), 1);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto [r, c] = entries[i];
    if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols())
      throw IndexError("gather_entries: (" + std::to_string(r) + ", " + std::to_string(c) +
                       ") outside " + shape_string(a.value()));
    out(static_cast<Index>(i), 0) = a.value()(r, c);
  }
  return a.tape().push(std::move(out), {a}, [a, entries](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < entries.size(); ++i)
      d(entries[i].first, entries[i].second) += g(static_cast<Index>(i), 0);
    t.accumulate(a, d);
  });
}

Var normalize_selected(Var a, const std::vector<std::vector<int>>& cols) {
  if (static_cast<Index>(cols.size()) != a.rows())
    throw DimensionError("normalize_selected: selection count does not match rows");
  Index k = 0;
  for (const auto& sel : cols) k = std::max(k, static_cast<Index>(sel.size()));
  Matrix out = Matrix::Zero(a.rows(), k);
  std::vector<double> sums(cols.size());
  for (Index r = 0; r < a.rows(); ++r) {
    const auto& sel = cols[static_cast<std::size_t>(r)];
    if (sel.empty()) throw PreconditionError("normalize_selected: empty selection in row " + std::to_string(r));
    double s = 0.0;
    for (int c : sel) {
      if (c < 0 || c >= a.cols()) throw IndexError("normalize_selected: column out of range");
      s += a.value()(r, c);
    }
    if (!(s > 0.0)) throw NumericError("normalize_selected: non-positive selected mass in row " + std::to_string(r));
    sums[static_cast<std::size_t>(r)] = s;
    for (std::size_t j = 0; j < sel.size(); ++j) out(r, static_cast<Index>(j)) = a.value()(r, sel[j]) / s;
  }
  return a.tape().push(out, {a}, [a, cols, sums, out](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    for (Index r = 0; r < a.rows(); ++r) {
      const auto& sel = cols[static_cast<std::size_t>(r)];
      const double s = sums[static_cast<std::size_t>(r)];
      const double gy = g.row(r).dot(out.row(r));
      for (std::size_t j = 0; j < sel.size(); ++j)
        d(r, sel[j]) += (g(r, static_cast<Index>(j)) - gy) / s;
    }
    t.accumulate(a, d);
  });
}

}  // namespace avmoe::ops
