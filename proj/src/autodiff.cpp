#include "vqvae/autodiff.h"

#include <utility>

namespace vqvae {

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw Error("use of an unbound Var");
  return tape_->value(id_);
}

Var Tape::Leaf(Tensor& t) {
  Node node;
  node.op = "leaf";
  node.external = &t;
  node.needs_grad = grad_enabled_ && t.requires_grad;
  node.leaf = node.needs_grad ? &t : nullptr;
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::Constant(Tensor t) {
  Node node;
  node.op = "constant";
  node.owned = std::move(t);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::Record(std::string_view op, Tensor value, std::vector<int> inputs,
                 BackwardFn backward) {
  if (check_every_op_ && !AllFinite(value.data)) {
    throw NumericError("non-finite value produced by forward op '" + std::string(op) + "'");
  }
  Node node;
  node.op = std::string(op);
  node.owned = std::move(value);
  for (int in : inputs) {
    if (in < 0 || static_cast<size_t>(in) >= nodes_.size()) {
      throw Error("op '" + node.op + "' references a value from another tape");
    }
    node.needs_grad = node.needs_grad || nodes_[static_cast<size_t>(in)].needs_grad;
  }
  node.inputs = std::move(inputs);
  if (node.needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

const Tensor& Tape::value(int id) const {
  const Node& n = nodes_.at(static_cast<size_t>(id));
  return n.external != nullptr ? *n.external : n.owned;
}

std::vector<float>& Tape::grad(int id) {
  Node& n = nodes_.at(static_cast<size_t>(id));
  if (n.grad.empty()) n.grad.assign(static_cast<size_t>(value(id).numel()), 0.0f);
  return n.grad;
}

bool Tape::has_grad(int id) const { return !nodes_.at(static_cast<size_t>(id)).grad.empty(); }

void Tape::Backward(Var loss) {
  if (loss.tape() != this) throw Error("Backward: loss belongs to a different tape");
  if (backward_done_) throw Error("Backward: tape already consumed");
  if (loss.value().numel() != 1) {
    throw ShapeError("Backward: loss must be a scalar, got shape " +
                     ShapeToString(loss.shape()));
  }
  if (!AllFinite(loss.value().data)) {
    throw NumericError("Backward: loss is not finite (op '" +
                       nodes_[static_cast<size_t>(loss.id())].op + "')");
  }
  backward_done_ = true;

  grad(loss.id())[0] = 1.0f;
  for (int id = loss.id(); id >= 0; --id) {
    Node& node = nodes_[static_cast<size_t>(id)];
    if (!node.needs_grad || node.grad.empty() || !node.backward) continue;
    node.backward(*this, id);
    for (int in : node.inputs) {
      const Node& input = nodes_[static_cast<size_t>(in)];
      if (!input.grad.empty() && !AllFinite(input.grad)) {
        throw NumericError("non-finite gradient produced by backward of op '" + node.op + "'");
      }
    }
  }

  for (Node& node : nodes_) {
    if (node.leaf != nullptr) node.leaf->zero_grad();
  }
  for (Node& node : nodes_) {
    if (node.leaf == nullptr || node.grad.empty()) continue;
    std::vector<float>& dst = node.leaf->grad;
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += node.grad[i];
  }
}

}  // namespace vqvae
