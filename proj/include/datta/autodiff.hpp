#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "datta/errors.hpp"
#include "datta/tensor.hpp"

namespace datta {

template <typename Scalar>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<Scalar>& value() const { return tape->value(*this); }
  const Shape& shape() const { return tape->value(*this).shape(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Reverse-mode tape over a closed op set. Nodes are appended in execution order, so
/// reverse insertion order is a valid reverse topological order.
template <typename Scalar>
class Tape {
 public:
  using TensorT = Tensor<Scalar>;
  /// Propagates the node's output gradient into its inputs' accumulators.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> leaf(TensorT value, bool requires_grad = false) {
    nodes_.push_back(Node{"leaf", {}, std::move(value), std::nullopt, requires_grad, {}});
    return {this, nodes_.size() - 1};
  }

  Var<Scalar> constant(TensorT value) { return leaf(std::move(value), false); }

  /// Records an op result. The backward closure is dropped when no input needs a gradient.
  Var<Scalar> record(const char* op, std::vector<Var<Scalar>> inputs, TensorT value, BackwardFn backward) {
    if (!value.all_finite()) throw NonFiniteError(std::string("non-finite output from ") + op);
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const auto& in : inputs) {
      check_owned(in);
      ids.push_back(in.id);
      needs = needs || nodes_[in.id].requires_grad;
    }
    nodes_.push_back(Node{op, std::move(ids), std::move(value), std::nullopt, needs, needs ? std::move(backward) : BackwardFn{}});
    return {this, nodes_.size() - 1};
  }

  const TensorT& value(Var<Scalar> v) const {
    check_owned(v);
    return nodes_[v.id].value;
  }
  bool requires_grad(Var<Scalar> v) const {
    check_owned(v);
    return nodes_[v.id].requires_grad;
  }
  std::size_t input(std::size_t node, std::size_t k) const { return nodes_[node].inputs[k]; }
  const TensorT& value_at(std::size_t node) const { return nodes_[node].value; }
  bool requires_grad_at(std::size_t node) const { return nodes_[node].requires_grad; }

  /// Output gradient of a node during backward.
  const TensorT& grad_at(std::size_t node) const { return *nodes_[node].grad; }

  /// Accumulator of an input node, allocated on first touch. Returns nullptr for nodes
  /// that do not require gradients so ops can skip the work.
  TensorT* accum(std::size_t node) {
    Node& n = nodes_[node];
    if (!n.requires_grad) return nullptr;
    if (!n.grad) n.grad = TensorT::like(n.value);
    return &*n.grad;
  }

  /// Runs the reverse pass from a scalar loss and returns d loss / d p for each requested
  /// leaf. Leaves that the loss does not reach get zero gradients.
  std::vector<TensorT> gradients(Var<Scalar> loss, std::span<const Var<Scalar>> wrt) {
    check_owned(loss);
    for (const auto& p : wrt) {
      check_owned(p);
      const Node& n = nodes_[p.id];
      if (!n.inputs.empty() || !n.requires_grad) {
        throw GraphError("gradient requested for a node that is not a trainable leaf (node " + std::to_string(p.id) +
                         ")");
      }
    }
    backward(loss);
    std::vector<TensorT> out;
    out.reserve(wrt.size());
    for (const auto& p : wrt) {
      const Node& n = nodes_[p.id];
      out.push_back(n.grad ? *n.grad : TensorT::like(n.value));
    }
    return out;
  }

  void backward(Var<Scalar> loss) {
    check_owned(loss);
    if (value(loss).size() != 1) {
      throw GraphError("backward requires a scalar loss, got shape " + shape_string(value(loss).shape()));
    }
    for (auto& n : nodes_) n.grad.reset();
    Node& root = nodes_[loss.id];
    if (!root.requires_grad) return;
    root.grad = TensorT::like(root.value, Scalar(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.grad || !n.backward) continue;
      n.backward(*this, i);
      ++visits_;
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Number of backward closures executed over the tape's lifetime.
  std::size_t backward_visits() const noexcept { return visits_; }

 private:
  struct Node {
    const char* op;
    std::vector<std::size_t> inputs;
    TensorT value;
    std::optional<TensorT> grad;
    bool requires_grad;
    BackwardFn backward;
  };

  void check_owned(Var<Scalar> v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw GraphError("variable does not belong to this tape");
  }

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

}  // namespace datta
