#pragma once

// Differentiable primitives on Tape variables. Every op records a closure that
// maps the output gradient to input gradients; all values are rank <= 2
// row-major matrices, vectors being 1 x n rows.

#include "avmoe/core/tape.hpp"

#include <utility>
#include <vector>

namespace avmoe::ops {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double factor);
/// a[m x n] + bias[1 x n] broadcast over rows.
Var add_row(Var a, Var bias);
/// a[m x n] + c[m x n] where c is a fixed matrix (no gradient to c).
Var add_constant(Var a, const Matrix& c);

Var gelu(Var a);
Var square(Var a);
Var sum(Var a);
Var mean(Var a);
/// Column means, [m x n] -> [1 x n].
Var col_mean(Var a);
/// Sum of a .* c for a fixed coefficient matrix c.
Var weighted_sum(Var a, const Matrix& c);

Var softmax_rows(Var logits);
/// Per-row log-sum-exp, [m x n] -> [m x 1].
Var logsumexp_rows(Var logits);
Var standardize_rows(Var a, double eps = 1e-5);

/// Mean squared error over all elements.
Var mse(Var pred, Var target);
Var mse(Var pred, const Matrix& target);
/// Mean over rows of -log softmax(logits[r])[targets[r]].
Var cross_entropy(Var logits, const std::vector<int>& targets);

struct AttentionOptions {
  bool causal = false;
  /// Rows per independent segment; 0 means the whole matrix is one segment.
  /// Segments let a stack of equal-length sequences share one node.
  Index query_segment = 0;
  Index key_segment = 0;
};

/// softmax(Q K^T / sqrt(d)) V, computed per segment.
Var attention(Var q, Var k, Var v, const AttentionOptions& options = {});

Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(Var a, Var b);
Var slice_rows(Var a, Index start, Index count);
Var gather_rows(Var a, const std::vector<int>& rows);
/// Builds an [n_rows x cols] matrix where part p is added into rows rows[p].
Var scatter_add_rows(Index n_rows, const std::vector<Var>& parts,
                     const std::vector<std::vector<int>>& rows);
/// Row r scaled by weights(r, 0).
Var scale_rows(Var a, Var weights);
/// Column vector of a(r, c) for each (r, c) pair.
Var gather_entries(Var a, const std::vector<std::pair<int, int>>& entries);
/// For each row r, out(r, j) = a(r, cols[r][j]) / sum_j a(r, cols[r][j]).
/// Rows may select different counts; unused trailing entries are 0.
Var normalize_selected(Var a, const std::vector<std::vector<int>>& cols);

}  // namespace avmoe::ops
