#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <utility>
#include <stdexcept>
#include <vector>

#include "ffpf/parameter.hpp"
#include "ffpf/tensor.hpp"

namespace ffpf {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::int32_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  std::int32_t id() const noexcept { return id_; }
  Tape<T>& tape() const { return *tape_; }
  const Tensor<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(*this); }

 private:
  Tape<T>* tape_ = nullptr;
  std::int32_t id_ = -1;
};

/// What a backward rule sees. `in_grads[i]` is null when input i does not need a gradient;
/// otherwise the rule accumulates (+=) into it.
template <typename T>
struct BackwardArgs {
  const Tensor<T>& out_value;
  const Tensor<T>& out_grad;
  std::span<const Tensor<T>* const> in_values;
  std::span<Tensor<T>* const> in_grads;
};

/// Records operations in execution order and replays their backward rules in reverse.
/// One tape belongs to one forward/backward pass and is not thread-safe.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const BackwardArgs<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// When disabled, nothing requires a gradient and backward rules are dropped on record.
  void set_grad_enabled(bool enabled) noexcept { grad_enabled_ = enabled; }
  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, nullptr, false, nullptr); }

  Var<T> leaf(Tensor<T> value) {
    return push(std::move(value), {}, nullptr, grad_enabled_, nullptr);
  }

  /// Reads the parameter's current value. Gradients flow back into `p.grad` on backward().
  Var<T> parameter(Parameter<T>& p) {
    return push(p.value, {}, nullptr, grad_enabled_ && p.trainable, &p);
  }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                  std::move(fn));
  }

  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    std::vector<std::int32_t> ids;
    ids.reserve(inputs.size());
    for (const auto& v : inputs) {
      if (&v.tape() != this) throw std::invalid_argument("Tape::record: input from another tape");
      ids.push_back(v.id());
      needs = needs || nodes_[static_cast<std::size_t>(v.id())].requires_grad;
    }
    needs = needs && grad_enabled_;
    return push(std::move(value), std::move(ids), needs ? std::move(fn) : BackwardFn{}, needs,
                nullptr);
  }

  const Tensor<T>& value(const Var<T>& v) const { return node(v).value; }
  bool requires_grad(const Var<T>& v) const { return node(v).requires_grad; }

  /// Gradient of the last backward() w.r.t. v, or nullptr when v was unreachable.
  const Tensor<T>* grad(const Var<T>& v) const {
    const auto& g = node(v).grad;
    return g.empty() && node(v).value.numel() != 0 ? nullptr : &g;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Runs every recorded backward rule in reverse order, seeding d(loss)/d(loss) = 1.
  void backward(const Var<T>& loss) {
    auto& root = node(loss);
    if (root.value.numel() != 1)
      throw std::invalid_argument("Tape::backward: loss must be a scalar, got shape " +
                                  root.value.shape().str());
    for (auto& n : nodes_)
      if (n.param != nullptr && n.requires_grad && !(n.param->grad.shape() == n.value.shape()))
        n.param->grad = Tensor<T>(n.value.shape());
    if (!root.requires_grad) return;
    root.grad = Tensor<T>(root.value.shape(), T(1));

    std::vector<const Tensor<T>*> in_values;
    std::vector<Tensor<T>*> in_grads;
    for (std::int32_t i = loss.id(); i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.param != nullptr) {
        auto pg = n.param->grad.values();
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad.values()[k];
      }
      if (!n.backward) continue;
      in_values.clear();
      in_grads.clear();
      for (auto id : n.inputs) {
        auto& in = nodes_[static_cast<std::size_t>(id)];
        in_values.push_back(&in.value);
        if (in.requires_grad) {
          if (in.grad.empty()) in.grad = Tensor<T>(in.value.shape());
          in_grads.push_back(&in.grad);
        } else {
          in_grads.push_back(nullptr);
        }
      }
      n.backward(BackwardArgs<T>{n.value, n.grad, in_values, in_grads});
    }
  }

  /// Folds bits describing which branch a piecewise op took. Two forward passes with equal
  /// signatures evaluated the same smooth piece, so finite differences between them are valid.
  /// Piecewise ops only report their branches while tracking is on; it costs a pass per op.
  void set_track_kinks(bool on) noexcept { track_kinks_ = on; }
  bool track_kinks() const noexcept { return track_kinks_; }

  void mix_kink(std::uint64_t bits) noexcept {
    kink_ ^= bits + 0x9e3779b97f4a7c15ULL + (kink_ << 6) + (kink_ >> 2);
  }
  std::uint64_t kink_signature() const noexcept { return kink_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::int32_t> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Var<T> push(Tensor<T> value, std::vector<std::int32_t> inputs, BackwardFn fn, bool needs,
              Parameter<T>* param) {
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
    n.param = param;
    n.requires_grad = needs;
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<std::int32_t>(nodes_.size() - 1));
  }

  const Node& node(const Var<T>& v) const {
    if (!v.valid() || &v.tape() != this || v.id() < 0 ||
        static_cast<std::size_t>(v.id()) >= nodes_.size())
      throw std::invalid_argument("Tape: variable does not belong to this tape");
    return nodes_[static_cast<std::size_t>(v.id())];
  }
  Node& node(const Var<T>& v) { return const_cast<Node&>(std::as_const(*this).node(v)); }

  std::vector<Node> nodes_;
  std::uint64_t kink_ = 0;
  bool grad_enabled_ = true;
  bool track_kinks_ = false;
};

}  // namespace ffpf
