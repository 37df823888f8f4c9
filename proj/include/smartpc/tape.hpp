#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "smartpc/errors.hpp"
#include "smartpc/random.hpp"
#include "smartpc/tensor.hpp"

namespace smartpc {

/// Handle to a node on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

/// Flat reverse-mode tape. Nodes are appended in evaluation order, so the
/// node vector is already a topological order and backward() walks it in
/// reverse. Gradients accumulate additively, which handles fan-out.
///
/// A tape built with record = false keeps only values: no backward closures,
/// no gradient buffers. Inference and BatchNorm statistics passes use that.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Input that never receives a gradient.
  Var constant(Tensor<T> value) { return push(std::move(value), false, {}); }
  /// Leaf that receives a gradient when the tape records.
  Var parameter(Tensor<T> value) { return push(std::move(value), record_, {}); }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  Tensor<T>& mutable_value(Var v) { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  /// Gradient of the last backward() root w.r.t. v; zeros if v was unreached.
  const Tensor<T>& grad(Var v) {
    auto& n = nodes_.at(v.id);
    if (n.grad.size() != n.value.size()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  /// Lazily zero-allocated gradient buffer. Ops call this for parents that
  /// need gradients and accumulate into it.
  Tensor<T>& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return nodes_[id].grad.size() == nodes_[id].value.size() && !nodes_[id].value.empty(); }

  Var push(Tensor<T> value, bool needs_grad, Backward fn) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad && record_;
    if (n.needs_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  /// Seeds d(root)/d(root) = 1 for a single-element root and propagates.
  void backward(Var root) {
    if (!record_) throw ContractViolation("backward on a non-recording tape");
    auto& r = nodes_.at(root.id);
    if (r.value.size() != 1) throw InvalidArgument("backward: root must be a scalar");
    for (auto& n : nodes_) n.grad = Tensor<T>();
    if (!r.needs_grad) return;
    grad_buffer(root.id)[0] = T{1};
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto& n = nodes_[i];
      if (n.needs_grad && n.backward && has_grad(i)) n.backward(*this, i);
    }
  }

  // Discrete decisions taken by non-smooth ops (relu masks, max-pool
  // argmaxes, nearest-neighbour assignments) are folded into a signature so a
  // finite-difference check can tell when a perturbation crossed a kink.
  void set_track_signature(bool on) noexcept { track_signature_ = on; }
  bool tracks_signature() const noexcept { return track_signature_; }
  void mix_signature(std::uint64_t v) noexcept {
    if (track_signature_) signature_ = mix_seed(signature_, v);
  }
  std::uint64_t signature() const noexcept { return signature_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    Backward backward;
  };

  bool record_;
  bool track_signature_ = false;
  std::uint64_t signature_ = 0;
  std::vector<Node> nodes_;
};

}  // namespace smartpc
