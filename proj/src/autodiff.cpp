#include "pulseformer/autodiff.hpp"

#include <unordered_set>
#include <utility>

namespace pulseformer {

namespace {
thread_local bool grad_enabled = true;
}

bool GradMode::enabled() { return grad_enabled; }
void GradMode::set_enabled(bool on) { grad_enabled = on; }

template <typename Scalar>
void backward(const Node<Scalar>& loss) {
  if (!loss.valid() || loss.value().size() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.valid() ? loss.shape().str() : std::string("null")));
  }
  if (!loss.requires_grad()) return;

  using Data = NodeData<Scalar>;
  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Data*> order;
  std::unordered_set<Data*> visited;
  std::vector<std::pair<Data*, std::size_t>> stack;
  stack.emplace_back(loss.data().get(), 0);
  visited.insert(loss.data().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Data* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Data* node : order) {
    if (!node->is_leaf) node->grad = Array<Scalar>(node->value.shape());
  }
  loss.data()->grad_buffer()[0] += Scalar(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Data* node = *it;
    if (!node->is_leaf && node->backward) node->backward(*node);
  }
}

template void backward<float>(const Node<float>&);
template void backward<double>(const Node<double>&);

}  // namespace pulseformer
