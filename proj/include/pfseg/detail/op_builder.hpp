#pragma once

// Internal helper shared by the kernel translation units for wiring a freshly
// computed result into the autodiff graph.

#include <utility>
#include <vector>

#include "pfseg/tensor.hpp"

namespace pfseg::detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const Tensor<T>* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

/// Builds the output node. The backward closure is attached only when grad
/// mode is on and some input requires grad; undefined inputs are recorded as
/// null entries so closures can index inputs positionally.
template <typename T, typename Fn>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs, Fn&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (grad_enabled() && any_requires_grad<T>(inputs)) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const Tensor<T>* t : inputs) {
      if (t && t->defined())
        node->inputs.push_back(t->node());
      else
        node->inputs.push_back(nullptr);
    }
    node->backward = std::forward<Fn>(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Gradient buffer of input i, or an empty span if it does not take gradients.
template <typename T>
std::span<T> input_grad(Node<T>& self, std::size_t i) {
  auto& in = self.inputs[i];
  if (!in || !in->requires_grad) return {};
  return in->grad_span();
}

template <typename T>
bool wants_grad(const Node<T>& self, std::size_t i) {
  const auto& in = self.inputs[i];
  return in && in->requires_grad;
}

}  // namespace pfseg::detail
