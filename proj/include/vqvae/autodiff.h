#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "vqvae/tensor.h"

namespace vqvae {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

#ifdef NDEBUG
inline constexpr bool kCheckEveryOpByDefault = false;
#else
inline constexpr bool kCheckEveryOpByDefault = true;
#endif

// Append-only record of one forward pass. Backward walks it in reverse once.
// A tape belongs to a single training step and must not be shared across
// threads.
class Tape {
 public:
  // Receives the tape and the node being differentiated; reads the node's
  // output gradient and accumulates into its inputs' gradients.
  using BackwardFn = std::function<void(Tape&, int)>;

  explicit Tape(bool check_every_op = kCheckEveryOpByDefault)
      : check_every_op_(check_every_op) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Inference mode: leaves bound afterwards are treated as constants and no
  // backward closures are kept.
  void DisableGrad() { grad_enabled_ = false; }

  // Binds an externally owned tensor. When |t.requires_grad| is set, backward
  // overwrites |t.grad| with dLoss/dt. |t| must outlive the tape.
  Var Leaf(Tensor& t);
  // A value that never receives gradient.
  Var Constant(Tensor t);

  // Op implementations call this after computing the forward value.
  Var Record(std::string_view op, Tensor value, std::vector<int> inputs, BackwardFn backward);

  const Tensor& value(int id) const;
  // Gradient buffer for node |id|, allocated as zeros on first access.
  std::vector<float>& grad(int id);
  bool has_grad(int id) const;
  bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
  const std::vector<int>& inputs(int id) const { return nodes_[static_cast<size_t>(id)].inputs; }
  size_t size() const { return nodes_.size(); }

  // |loss| must be a single-element value on this tape. Throws NumericError
  // naming the op whose backward produced a non-finite gradient.
  void Backward(Var loss);

 private:
  struct Node {
    std::string op;
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor* leaf = nullptr;
    std::vector<float> grad;
    std::vector<int> inputs;
    BackwardFn backward;
    bool needs_grad = false;
  };

  bool check_every_op_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
};

}  // namespace vqvae
