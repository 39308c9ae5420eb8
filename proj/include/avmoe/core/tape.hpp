#pragma once

#include "avmoe/core/types.hpp"

#include <deque>
#include <functional>
#include <map>
#include <string>

namespace avmoe {

/// Trainable matrix with a persistent gradient buffer.
struct Parameter {
  Matrix value;
  Matrix grad;

  Parameter() = default;
  explicit Parameter(Matrix init) : value(std::move(init)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Name-ordered collection of parameters. Iteration order is lexicographic,
/// which keeps checkpoints and optimizer sweeps deterministic.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Matrix init);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grad();
  Index scalar_count() const;
  std::size_t size() const { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  bool same_shapes(const ParameterStore& other) const;

 private:
  std::map<std::string, Parameter> params_;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;

  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode gradient tape. Nodes are appended in evaluation order, so
/// creation order is a topological order and backward() walks it in reverse.
/// A tape built with recording disabled stores values only; its outputs are
/// constants and backward() is an error.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Var constant(Matrix value);
  Var variable(Matrix value);
  /// Leaf bound to a parameter; backward() adds into `p.grad`.
  Var parameter(Parameter& p);

  /// Appends an op result. `backward` runs only if some input needs a gradient.
  Var push(Matrix value, std::initializer_list<Var> inputs, Backward backward);
  Var push(Matrix value, const std::vector<Var>& inputs, Backward backward);

  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id())].needs_grad; }
  void accumulate(Var v, const Matrix& g);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every leaf.
  void backward(Var loss);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Matrix& grad(int id) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };

  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id())]; }

  bool recording_;
  bool backward_done_ = false;
  std::deque<Node> nodes_;
};

}  // namespace avmoe
