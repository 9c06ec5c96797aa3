#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "moe_snnl/tensor.hpp"

namespace moe_snnl {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = std::numeric_limits<std::size_t>::max();
};

/// Reverse-mode recording. Nodes are appended in creation order, which is a
/// topological order since inputs always precede outputs; backward walks the
/// list in reverse and runs each node's rule at most once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Input that never receives a gradient.
  Var constant(Tensor value) { return push("constant", std::move(value), {}, nullptr, false, nullptr); }

  /// Input whose gradient is kept on the tape (see grad()).
  Var variable(Tensor value) { return push("variable", std::move(value), {}, nullptr, true, nullptr); }

  /// Parameter leaf: after backward the gradient is accumulated into param.tensor.grad().
  Var leaf(Parameter& param) { return push("param:" + param.name, Tensor(param.tensor.shape(), param.tensor.values()), {}, nullptr, true, &param); }

  /// Appends an operation result. The backward rule only runs when some input
  /// needs a gradient.
  Var record(std::string op, Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& in : inputs) {
      check_owned(in, op);
      ids.push_back(in.id());
      needs = needs || nodes_[in.id()].requires_grad;
    }
    if (!value.all_finite()) {
      throw NumericError("non-finite value produced by '" + op + "'");
    }
    return push(std::move(op), std::move(value), std::move(ids), needs ? std::move(fn) : nullptr, needs, nullptr);
  }

  const Tensor& value(const Var& v) const { return node(v).value; }
  bool needs_grad(const Var& v) const { return node(v).requires_grad; }

  /// Gradient buffer of a recorded value, allocated on first access.
  std::vector<Real>& grad_buffer(const Var& v) { return grad_buffer(v.id()); }
  std::vector<Real>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  /// Gradient after backward(); zeros if the value was unreachable.
  std::vector<Real> grad(const Var& v) const {
    const Node& n = node(v);
    return n.grad.empty() ? std::vector<Real>(n.value.size(), 0.0) : n.grad;
  }

  void backward(const Var& root) {
    if (!root.valid() || root.tape() != this || root.id() >= nodes_.size()) {
      throw std::logic_error("backward: root was not recorded on this tape");
    }
    if (backward_done_) {
      throw std::logic_error("backward: already called on this tape; reset() before reuse");
    }
    const Node& r = nodes_[root.id()];
    if (r.value.size() != 1) {
      throw DimensionError("backward: root must be scalar, got shape " + to_string(r.value.shape()));
    }
    backward_done_ = true;
    grad_buffer(root.id())[0] = 1.0;
    for (std::size_t id = root.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
    for (Node& n : nodes_) {
      if (n.param == nullptr) continue;
      auto& dst = n.param->tensor.grad();
      if (n.grad.empty()) continue;
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
    }
  }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::size_t>& inputs_of(std::size_t id) const { return nodes_.at(id).inputs; }
  const std::string& op_of(std::size_t id) const { return nodes_.at(id).op; }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<Real> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    Parameter* param = nullptr;
  };

  Var push(std::string op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, bool requires_grad,
           Parameter* param) {
    if (backward_done_) throw std::logic_error("tape is closed after backward; reset() before recording");
    if (param != nullptr) param->tensor.grad();  // recorded parameters always end with a gradient
    nodes_.push_back(Node{std::move(op), std::move(value), {}, std::move(inputs), std::move(fn), requires_grad, param});
    return Var(this, nodes_.size() - 1);
  }

  void check_owned(const Var& v, const std::string& op) const {
    if (!v.valid() || v.tape() != this || v.id() >= nodes_.size()) {
      throw std::logic_error("'" + op + "' received a value not recorded on this tape");
    }
  }

  const Node& node(const Var& v) const {
    check_owned(v, "access");
    return nodes_[v.id()];
  }

  std::deque<Node> nodes_;  // stable references across push_back
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

}  // namespace moe_snnl
