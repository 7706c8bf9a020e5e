#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pulseformer/array.hpp"

namespace pulseformer {

/// Global switch for graph recording, thread-local. While disabled, ops
/// produce plain values with no parents and no backward closure.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
struct NodeData {
  Array<Scalar> value;
  Array<Scalar> grad;  // empty until first touched
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<NodeData>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(NodeData&)> backward;

  Array<Scalar>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Array<Scalar>(value.shape());
    return grad;
  }
};

/// Handle to a value in the computation graph. Copies share the node.
template <typename Scalar>
class Node {
 public:
  Node() = default;
  explicit Node(Array<Scalar> value, bool requires_grad = false)
      : data_(std::make_shared<NodeData<Scalar>>()) {
    data_->value = std::move(value);
    data_->requires_grad = requires_grad;
  }

  static Node parameter(Array<Scalar> value) { return Node(std::move(value), true); }
  static Node constant(Array<Scalar> value) { return Node(std::move(value), false); }

  bool valid() const { return static_cast<bool>(data_); }
  const Array<Scalar>& value() const { return data_->value; }
  Array<Scalar>& mutable_value() { return data_->value; }
  const Shape& shape() const { return data_->value.shape(); }
  bool requires_grad() const { return data_->requires_grad; }
  void set_requires_grad(bool on) { data_->requires_grad = on; }

  bool has_grad() const { return data_->grad.shape() == data_->value.shape(); }
  /// Gradient, materialized as zeros if never written.
  const Array<Scalar>& grad() const { return data_->grad_buffer(); }
  Array<Scalar>& mutable_grad() { return data_->grad_buffer(); }
  void zero_grad() { data_->grad = Array<Scalar>(); }

  Scalar item() const {
    if (value().size() != 1) throw ContractError("item() on non-scalar " + shape().str());
    return value()[0];
  }

  const std::shared_ptr<NodeData<Scalar>>& data() const { return data_; }

 private:
  std::shared_ptr<NodeData<Scalar>> data_;
};

/// Builds an interior node. When recording is off or no parent needs a
/// gradient, the node is returned as a constant and `backward` is dropped.
template <typename Scalar>
Node<Scalar> make_result(Array<Scalar> value, std::vector<Node<Scalar>> parents,
                         std::function<void(NodeData<Scalar>&)> backward) {
  bool needs = false;
  if (GradMode::enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  Node<Scalar> out(std::move(value), needs);
  if (needs) {
    auto& d = *out.data();
    d.is_leaf = false;
    d.parents.reserve(parents.size());
    for (const auto& p : parents) d.parents.push_back(p.data());
    d.backward = std::move(backward);
  }
  return out;
}

/// Reverse-mode sweep from a scalar loss. Interior gradients are reset on
/// every call; leaf gradients accumulate across calls until zero_grad().
template <typename Scalar>
void backward(const Node<Scalar>& loss);

extern template void backward<float>(const Node<float>&);
extern template void backward<double>(const Node<double>&);

}  // namespace pulseformer
