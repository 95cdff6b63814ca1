#pragma once

// Internal interface for op implementations. Not needed by model code.

#include <functional>
#include <memory>
#include <vector>

#include "cmseg/tensor.hpp"

namespace cmseg::detail {

struct Node {
  Shape shape;
  std::shared_ptr<std::vector<float>> data;
  std::vector<float> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads self.grad and accumulates into inputs' grads.
  std::function<void(Node& self)> backward;
};

std::shared_ptr<std::vector<float>> allocate(int64_t count, float fill = 0.0F);

/// Returns the gradient buffer of a node, allocating zeros on first use.
std::vector<float>& grad_buffer(Node& node);

/// Builds an op result. History is recorded only when grad mode is on and
/// at least one input requires grad. Throws NonFiniteError if any output
/// value is NaN or infinite.
Tensor make_result(const char* op, Shape shape,
                   std::shared_ptr<std::vector<float>> data,
                   std::vector<Tensor> inputs,
                   std::function<void(Node& self)> backward_fn);

inline Node& node_of(const Tensor& t) { return *t.node(); }

void check_finite(const char* op, std::span<const float> values);

}  // namespace cmseg::detail
