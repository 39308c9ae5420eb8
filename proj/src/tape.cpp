#include "avmoe/core/tape.hpp"

namespace avmoe {

Parameter& ParameterStore::add(const std::string& name, Matrix init) {
  auto [it, inserted] = params_.try_emplace(name, std::move(init));
  if (!inserted) throw ConfigError("duplicate parameter name: " + name);
  return it->second;
}

Parameter& ParameterStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

const Parameter& ParameterStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

void ParameterStore::zero_grad() {
  for (auto& [_, p] : params_) p.zero_grad();
}

Index ParameterStore::scalar_count() const {
  Index n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

bool ParameterStore::same_shapes(const ParameterStore& other) const {
  if (params_.size() != other.params_.size()) return false;
  auto a = params_.begin();
  auto b = other.params_.begin();
  for (; a != params_.end(); ++a, ++b) {
    if (a->first != b->first) return false;
    if (a->second.value.rows() != b->second.value.rows() ||
        a->second.value.cols() != b->second.value.cols())
      return false;
  }
  return true;
}

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw DimensionError("scalar() on non-scalar node " + shape_string(v));
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, recording_, nullptr, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::parameter(Parameter& p) {
  nodes_.push_back(Node{p.value, {}, recording_, recording_ ? &p : nullptr, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::push(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
  bool needs = false;
  if (recording_) {
    for (const Var& in : inputs) needs = needs || needs_grad(in);
  }
  nodes_.push_back(Node{std::move(value), {}, needs, nullptr, needs ? std::move(backward) : Backward{}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::push(Matrix value, const std::vector<Var>& inputs, Backward backward) {
  bool needs = false;
  if (recording_) {
    for (const Var& in : inputs) needs = needs || needs_grad(in);
  }
  nodes_.push_back(Node{std::move(value), {}, needs, nullptr, needs ? std::move(backward) : Backward{}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = node(v);
  if (!n.needs_grad) return;
  if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
    throw DimensionError("gradient " + shape_string(g) + " does not match value " +
                         shape_string(n.value));
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

const Matrix& Tape::grad(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  static const Matrix kEmpty;
  return n.grad.size() == 0 ? kEmpty : n.grad;
}

void Tape::backward(Var loss) {
  if (!recording_) throw PreconditionError("backward() on a non-recording tape");
  if (backward_done_) throw PreconditionError("backward() called twice on the same tape");
  if (loss.value().size() != 1)
    throw DimensionError("backward() needs a scalar loss, got " + shape_string(loss.value()));
  backward_done_ = true;
  if (!node(loss).needs_grad) return;
  node(loss).grad = Matrix::Ones(1, 1);
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param != nullptr) n.param->grad += n.grad;
  }
}

}  // namespace avmoe
