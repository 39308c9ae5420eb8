#include "avmoe/core/grad_check.hpp"
#include "avmoe/core/kernels.hpp"
#include "avmoe/core/ops.hpp"
#include "avmoe/core/random.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <map>

using namespace avmoe;

namespace {

Matrix random_matrix(Index rows, Index cols, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_matrix(rows, cols);
}

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index r = 0;
  for (const auto& row : rows) {
    Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

Matrix value_of(const std::function<Var(Tape&)>& build) {
  Tape tape(false);
  return build(tape).value();
}

}  // namespace

TEST(Matmul, IdentityLeavesOperand) {
  const Matrix b = mat({{3, 4}, {5, 6}});
  const Matrix out = value_of([&](Tape& t) { return ops::matmul(t.constant(Matrix::Identity(2, 2)), t.constant(b)); });
  EXPECT_EQ(out, b);
}

TEST(Matmul, ZeroLeftOperandGivesZero) {
  const Matrix out =
      value_of([&](Tape& t) { return ops::matmul(t.constant(Matrix::Zero(2, 3)), t.constant(random_matrix(3, 2, 1))); });
  EXPECT_EQ(out, Matrix::Zero(2, 2));
}

TEST(Matmul, MatchesTripleLoop) {
  const Matrix a = random_matrix(4, 3, 2), b = random_matrix(3, 5, 3);
  const Matrix out = value_of([&](Tape& t) { return ops::matmul(t.constant(a), t.constant(b)); });
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 5; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
      EXPECT_NEAR(out(i, j), s, 1e-12);
    }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    ops::matmul(t.constant(Matrix::Zero(2, 3)), t.constant(Matrix::Zero(2, 3)));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos);
  }
}

TEST(Softmax, Closed) {
  RowVector zeros = RowVector::Zero(4);
  const RowVector p = kernels::softmax(zeros);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p(i), 0.25);
  RowVector v(2);
  v << 0.0, std::log(3.0);
  const RowVector q = kernels::softmax(v);
  EXPECT_NEAR(q(0), 0.25, 1e-15);
  EXPECT_NEAR(q(1), 0.75, 1e-15);
}

TEST(Softmax, SumsToOneAndIsShiftInvariant) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const Matrix v = rng.normal_matrix(1, 7, 5.0);
    const double c = rng.uniform(-100, 100);
    const Matrix p = kernels::softmax_rows(v);
    const Matrix shifted = kernels::softmax_rows(Matrix(v.array() + c));
    EXPECT_NEAR(p.sum(), 1.0, 1e-9);
    EXPECT_LT((p - shifted).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_TRUE((p.array() > 0).all());
  }
}

TEST(Softmax, EmptyIsPrecondition) {
  EXPECT_THROW(kernels::softmax(RowVector(0)), PreconditionError);
}

TEST(Attention, SingleRowReturnsValue) {
  const Matrix v = random_matrix(1, 3, 4);
  const Matrix out = value_of([&](Tape& t) {
    return ops::attention(t.constant(random_matrix(1, 3, 5)), t.constant(random_matrix(1, 3, 6)), t.constant(v));
  });
  EXPECT_LT((out - v).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Attention, SharpQueryPicksMatchingValue) {
  const Matrix k = Matrix::Identity(3, 3);
  const Matrix v = random_matrix(3, 3, 7);
  const Matrix q = 200.0 * k;
  const Matrix out = value_of([&](Tape& t) { return ops::attention(t.constant(q), t.constant(k), t.constant(v)); });
  EXPECT_LT((out - v).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Attention, MatchesScalarLoop) {
  const Matrix q = random_matrix(3, 2, 8), k = random_matrix(3, 2, 9), v = random_matrix(3, 2, 10);
  for (bool causal : {false, true}) {
    ops::AttentionOptions opt;
    opt.causal = causal;
    const Matrix out =
        value_of([&](Tape& t) { return ops::attention(t.constant(q), t.constant(k), t.constant(v), opt); });
    for (int i = 0; i < 3; ++i) {
      double w[3], total = 0;
      const int last = causal ? i : 2;
      for (int j = 0; j <= last; ++j) {
        w[j] = std::exp((q(i, 0) * k(j, 0) + q(i, 1) * k(j, 1)) / std::sqrt(2.0));
        total += w[j];
      }
      for (int c = 0; c < 2; ++c) {
        double s = 0;
        for (int j = 0; j <= last; ++j) s += w[j] / total * v(j, c);
        EXPECT_NEAR(out(i, c), s, 1e-10);
      }
    }
  }
}

TEST(Attention, SegmentsAreIndependent) {
  const Matrix q = random_matrix(4, 3, 11), k = random_matrix(6, 3, 12), v = random_matrix(6, 3, 13);
  ops::AttentionOptions opt;
  opt.query_segment = 2;
  opt.key_segment = 3;
  const Matrix out = value_of([&](Tape& t) { return ops::attention(t.constant(q), t.constant(k), t.constant(v), opt); });
  for (int s = 0; s < 2; ++s) {
    const Matrix part = value_of([&](Tape& t) {
      return ops::attention(t.constant(q.middleRows(2 * s, 2)), t.constant(k.middleRows(3 * s, 3)),
                            t.constant(v.middleRows(3 * s, 3)));
    });
    EXPECT_EQ(Matrix(out.middleRows(2 * s, 2)), part);
  }
}

TEST(Attention, ZeroWidthIsPrecondition) {
  Tape t;
  EXPECT_THROW(ops::attention(t.constant(Matrix(2, 0)), t.constant(Matrix(2, 0)), t.constant(Matrix(2, 0))),
               PreconditionError);
}

TEST(Mse, Closed) {
  Tape t;
  EXPECT_EQ(ops::mse(t.constant(mat({{1, 1}})), mat({{1, 1}})).scalar(), 0.0);
  EXPECT_EQ(ops::mse(t.constant(mat({{1, 1}})), mat({{0, 0}})).scalar(), 1.0);
  EXPECT_THROW(ops::mse(t.constant(mat({{1, 1}})), mat({{0}})), DimensionError);
}

TEST(Mse, MatchesLongDoubleSum) {
  const Matrix a = random_matrix(5, 4, 14), b = random_matrix(5, 4, 15);
  long double s = 0;
  for (Index i = 0; i < a.size(); ++i) {
    const long double d = (long double)a.data()[i] - (long double)b.data()[i];
    s += d * d;
  }
  Tape t;
  EXPECT_NEAR(ops::mse(t.constant(a), b).scalar(), double(s / a.size()), 1e-12);
}

TEST(CrossEntropy, Closed) {
  Tape t;
  Matrix sharp = Matrix::Zero(1, 5);
  sharp(0, 0) = 100;
  EXPECT_LT(ops::cross_entropy(t.constant(sharp), {0}).scalar(), 1e-6);
  for (int target = 0; target < 8; ++target)
    EXPECT_NEAR(ops::cross_entropy(t.constant(Matrix::Zero(1, 8)), {target}).scalar(), std::log(8.0), 1e-12);
  EXPECT_THROW(ops::cross_entropy(t.constant(Matrix::Zero(1, 8)), {8}), IndexError);
  EXPECT_THROW(ops::cross_entropy(t.constant(Matrix::Zero(1, 8)), {-1}), IndexError);
}

TEST(CrossEntropy, MatchesNaiveSoftmax) {
  const Matrix logits = random_matrix(3, 6, 16);
  const std::vector<int> targets = {2, 0, 5};
  double naive = 0;
  for (int r = 0; r < 3; ++r) {
    double z = 0;
    for (int c = 0; c < 6; ++c) z += std::exp(logits(r, c));
    naive += -std::log(std::exp(logits(r, targets[r])) / z);
  }
  Tape t;
  EXPECT_NEAR(ops::cross_entropy(t.constant(logits), targets).scalar(), naive / 3, 1e-9);
}

TEST(GradCheck, ExactQuadratic) {
  const double err = grad_check([](Tape&, Var x) { return ops::sum(ops::square(x)); }, random_matrix(3, 4, 17), 1e-4);
  EXPECT_LT(err, 1e-7);
}

TEST(GradCheck, MseAfterMatmulChain) {
  const Matrix target = random_matrix(3, 3, 18), w = random_matrix(3, 3, 19);
  const double err = grad_check(
      [&](Tape& t, Var x) { return ops::mse(ops::matmul(ops::matmul(x, t.constant(w)), x), target); },
      random_matrix(3, 3, 20), 1e-4);
  EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
  const double err = grad_check([](Tape& t, Var) { return t.constant(Matrix::Constant(1, 1, 3.0)); },
                                random_matrix(2, 2, 21), 1e-4);
  EXPECT_EQ(err, 0.0);
}

TEST(GradCheck, RejectsEpsOutsideRange) {
  auto f = [](Tape&, Var x) { return ops::sum(x); };
  EXPECT_THROW(grad_check(f, Matrix::Zero(1, 1), 1e-2), PreconditionError);
  EXPECT_THROW(grad_check(f, Matrix::Zero(1, 1), 1e-8), PreconditionError);
}

TEST(GradCheck, NonFiniteNamesCoordinate) {
  // log is undefined once the last coordinate is pushed below zero by eps.
  const Matrix x = mat({{1.0, 1.0, 5e-5}});
  auto f = [](Tape& t, Var v) {
    Matrix out(1, 1);
    out(0, 0) = v.value().array().log().sum();
    return t.push(out, {v}, [v](Tape& tt, const Matrix& g) { tt.accumulate(v, g(0, 0) * v.value().cwiseInverse()); });
  };
  try {
    grad_check(f, x, 1e-4);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 2"), std::string::npos);
  }
}

namespace {

/// Scalar probes for every primitive; a fixed random projection turns matrix
/// outputs into a scalar with a generic gradient.
struct Probe {
  std::vector<std::pair<Index, Index>> shapes;
  std::function<Var(Tape&, std::span<const Var>)> f;
};

Var project(Tape& t, Var y, std::uint64_t seed) {
  return ops::weighted_sum(y, random_matrix(y.rows(), y.cols(), seed + 1000));
}

std::map<std::string, Probe> probes() {
  std::map<std::string, Probe> p;
  p["matmul"] = {{{3, 4}, {4, 2}}, [](Tape& t, auto v) { return project(t, ops::matmul(v[0], v[1]), 1); }};
  p["add"] = {{{2, 3}, {2, 3}}, [](Tape& t, auto v) { return project(t, ops::add(v[0], v[1]), 2); }};
  p["sub"] = {{{2, 3}, {2, 3}}, [](Tape& t, auto v) { return project(t, ops::sub(v[0], v[1]), 3); }};
  p["hadamard"] = {{{2, 3}, {2, 3}}, [](Tape& t, auto v) { return project(t, ops::hadamard(v[0], v[1]), 4); }};
  p["scale"] = {{{2, 3}}, [](Tape& t, auto v) { return project(t, ops::scale(v[0], -1.7), 5); }};
  p["add_row"] = {{{3, 2}, {1, 2}}, [](Tape& t, auto v) { return project(t, ops::add_row(v[0], v[1]), 6); }};
  p["add_constant"] = {{{2, 2}}, [](Tape& t, auto v) {
                         return project(t, ops::add_constant(v[0], random_matrix(2, 2, 7)), 7);
                       }};
  p["gelu"] = {{{3, 3}}, [](Tape& t, auto v) { return project(t, ops::gelu(v[0]), 8); }};
  p["square"] = {{{3, 3}}, [](Tape& t, auto v) { return project(t, ops::square(v[0]), 9); }};
  p["sum"] = {{{2, 3}}, [](Tape& t, auto v) { return ops::sum(ops::square(v[0])); }};
  p["mean"] = {{{2, 3}}, [](Tape& t, auto v) { return ops::mean(ops::square(v[0])); }};
  p["col_mean"] = {{{4, 3}}, [](Tape& t, auto v) { return project(t, ops::col_mean(v[0]), 10); }};
  p["softmax_rows"] = {{{3, 5}}, [](Tape& t, auto v) { return project(t, ops::softmax_rows(v[0]), 11); }};
  p["logsumexp_rows"] = {{{3, 5}}, [](Tape& t, auto v) { return project(t, ops::logsumexp_rows(v[0]), 12); }};
  p["standardize_rows"] = {{{3, 5}}, [](Tape& t, auto v) { return project(t, ops::standardize_rows(v[0]), 13); }};
  p["mse"] = {{{3, 2}, {3, 2}}, [](Tape&, auto v) { return ops::mse(v[0], v[1]); }};
  p["cross_entropy"] = {{{3, 4}}, [](Tape&, auto v) { return ops::cross_entropy(v[0], {1, 3, 0}); }};
  p["attention"] = {{{4, 3}, {4, 3}, {4, 3}},
                    [](Tape& t, auto v) { return project(t, ops::attention(v[0], v[1], v[2]), 14); }};
  p["attention_causal_segments"] = {{{4, 3}, {4, 3}, {4, 3}}, [](Tape& t, auto v) {
                                      ops::AttentionOptions o{true, 2, 2};
                                      return project(t, ops::attention(v[0], v[1], v[2], o), 15);
                                    }};
  p["concat_rows"] = {{{2, 3}, {1, 3}}, [](Tape& t, auto v) { return project(t, ops::concat_rows({v[0], v[1]}), 16); }};
  p["concat_cols"] = {{{2, 3}, {2, 1}}, [](Tape& t, auto v) { return project(t, ops::concat_cols(v[0], v[1]), 17); }};
  p["slice_rows"] = {{{4, 2}}, [](Tape& t, auto v) { return project(t, ops::slice_rows(v[0], 1, 2), 18); }};
  p["gather_rows"] = {{{4, 2}}, [](Tape& t, auto v) { return project(t, ops::gather_rows(v[0], {3, 0, 3}), 19); }};
  p["scatter_add_rows"] = {{{2, 3}, {1, 3}}, [](Tape& t, auto v) {
                             return project(t, ops::scatter_add_rows(4, {v[0], v[1]}, {{0, 2}, {2}}), 20);
                           }};
  p["scale_rows"] = {{{3, 2}, {3, 1}}, [](Tape& t, auto v) { return project(t, ops::scale_rows(v[0], v[1]), 21); }};
  p["gather_entries"] = {{{3, 3}}, [](Tape& t, auto v) {
                           return project(t, ops::gather_entries(v[0], {{0, 1}, {2, 2}, {0, 1}}), 22);
                         }};
  p["normalize_selected"] = {{{3, 4}}, [](Tape& t, auto v) {
                               return project(t, ops::normalize_selected(ops::softmax_rows(v[0]), {{0, 2}, {3}, {1, 2}}), 23);
                             }};
  return p;
}

}  // namespace

TEST(GradCheck, EveryPrimitiveOverTwentySeeds) {
  for (const auto& [name, probe] : probes()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::vector<Matrix> inputs;
      for (std::size_t i = 0; i < probe.shapes.size(); ++i)
        inputs.push_back(random_matrix(probe.shapes[i].first, probe.shapes[i].second, seed * 31 + i));
      const GradCheckResult r = grad_check(probe.f, inputs, 1e-4);
      EXPECT_LT(r.max_relative_error, 1e-4) << name << " seed " << seed;
    }
  }
}

TEST(Tape, ReusedValueAccumulatesBothContributions) {
  Tape t;
  Var x = t.variable(mat({{2.0}}));
  Var y = ops::add(ops::square(x), ops::scale(x, 3.0));
  t.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 2 * 2.0 + 3.0);
}

TEST(Tape, BranchOrderDoesNotChangeGradients) {
  const Matrix a = random_matrix(3, 3, 30), w1 = random_matrix(3, 3, 31), w2 = random_matrix(3, 3, 32);
  auto run = [&](bool swap) {
    Tape t;
    Var x = t.variable(a);
    Var b1, b2;
    if (swap) {
      b2 = ops::sum(ops::gelu(ops::matmul(x, t.constant(w2))));
      b1 = ops::sum(ops::square(ops::matmul(x, t.constant(w1))));
    } else {
      b1 = ops::sum(ops::square(ops::matmul(x, t.constant(w1))));
      b2 = ops::sum(ops::gelu(ops::matmul(x, t.constant(w2))));
    }
    t.backward(ops::add(b1, b2));
    return Matrix(x.grad());
  };
  EXPECT_LT((run(false) - run(true)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Tape, ParameterGradientsAccumulateAcrossBindings) {
  Parameter p(mat({{1.0, -2.0}}));
  Tape t;
  Var a = t.parameter(p);
  Var b = t.parameter(p);
  t.backward(ops::add(ops::sum(a), ops::sum(ops::scale(b, 2.0))));
  EXPECT_EQ(p.grad, mat({{3.0, 3.0}}));
}

TEST(Tape, BackwardTwiceIsAnError) {
  Tape t;
  Var x = t.variable(mat({{1.0}}));
  Var y = ops::square(x);
  t.backward(y);
  EXPECT_ANY_THROW(t.backward(y));
}

TEST(Random, DerivedStreamsDiffer) {
  EXPECT_NE(derive_seed(1, "data"), derive_seed(1, "corruption"));
  EXPECT_EQ(derive_seed(1, "data", 3), derive_seed(1, "data", 3));
  EXPECT_NE(derive_seed(1, "data", 3), derive_seed(1, "data", 4));
}

TEST(Random, OrthonormalRows) {
  Rng rng(5);
  const Matrix q = random_orthonormal(6, 10, rng);
  EXPECT_LT((q * q.transpose() - Matrix::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-12);
}
