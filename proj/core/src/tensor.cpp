#include "cmseg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include "cmseg/autograd.hpp"

namespace cmseg {

namespace {

thread_local bool t_grad_enabled = true;

// -1 means no probe is active.
std::atomic<int64_t> g_largest_allocation{-1};

void record_allocation(int64_t count) {
  int64_t current = g_largest_allocation.load(std::memory_order_relaxed);
  while (current >= 0 && count > current &&
         !g_largest_allocation.compare_exchange_weak(current, count, std::memory_order_relaxed)) {
  }
}

detail::Node& require(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw ValueError("operation on undefined tensor");
  return *node;
}

}  // namespace

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace detail {

std::shared_ptr<std::vector<float>> allocate(int64_t count, float fill) {
  record_allocation(count);
  return std::make_shared<std::vector<float>>(static_cast<size_t>(count), fill);
}

std::vector<float>& grad_buffer(Node& node) {
  if (node.grad.empty() && !node.data->empty()) {
    record_allocation(static_cast<int64_t>(node.data->size()));
    node.grad.assign(node.data->size(), 0.0F);
  }
  return node.grad;
}

void check_finite(const char* op, std::span<const float> values) {
  for (float v : values) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value produced by ") + op);
  }
}

Tensor make_result(const char* op, Shape shape, std::shared_ptr<std::vector<float>> data,
                   std::vector<Tensor> inputs, std::function<void(Node& self)> backward_fn) {
  if (numel(shape) != static_cast<int64_t>(data->size())) {
    throw ShapeError(std::string(op) + ": buffer size does not match shape " + to_string(shape));
  }
  check_finite(op, *data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  node->is_leaf = false;
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) needs = needs || (in.defined() && in.node()->requires_grad);
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

Tensor::Tensor(Shape shape, float fill) {
  auto node = std::make_shared<detail::Node>();
  node->data = detail::allocate(cmseg::numel(shape), fill);
  node->shape = std::move(shape);
  node_ = std::move(node);
}

Tensor::Tensor(Shape shape, std::vector<float> values) {
  if (cmseg::numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     to_string(shape));
  }
  record_allocation(static_cast<int64_t>(values.size()));
  auto node = std::make_shared<detail::Node>();
  node->data = std::make_shared<std::vector<float>>(std::move(values));
  node->shape = std::move(shape);
  node_ = std::move(node);
}

Tensor Tensor::scalar(float value) { return Tensor(Shape{1}, std::vector<float>{value}); }

const Shape& Tensor::shape() const { return require(node_).shape; }

int64_t Tensor::dim(int64_t axis) const {
  const auto& s = shape();
  if (axis < 0) axis += static_cast<int64_t>(s.size());
  if (axis < 0 || axis >= static_cast<int64_t>(s.size())) {
    throw ShapeError("axis out of range for shape " + to_string(s));
  }
  return s[static_cast<size_t>(axis)];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(require(node_).data->size()); }

std::span<const float> Tensor::data() const { return *require(node_).data; }

std::span<float> Tensor::mutable_data() {
  auto& node = require(node_);
  if (!node.is_leaf) throw ValueError("mutable_data() on a non-leaf tensor");
  return *node.data;
}

std::vector<float> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return data()[0];
}

bool Tensor::requires_grad() const { return require(node_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  auto& node = require(node_);
  if (!node.is_leaf) throw ValueError("requires_grad can only be set on leaves");
  node.requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return require(node_).is_leaf; }

std::vector<float> Tensor::grad() const {
  const auto& node = require(node_);
  if (node.grad.empty()) return std::vector<float>(node.data->size(), 0.0F);
  return node.grad;
}

bool Tensor::has_grad() const { return !require(node_).grad.empty(); }

void Tensor::zero_grad() {
  auto& node = require(node_);
  std::fill(node.grad.begin(), node.grad.end(), 0.0F);
}

Tensor Tensor::detach() const {
  const auto& src = require(node_);
  auto node = std::make_shared<detail::Node>();
  node->shape = src.shape;
  node->data = src.data;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  const auto& src = require(node_);
  Tensor out(src.shape, *src.data);
  out.node_->requires_grad = src.requires_grad && src.is_leaf;
  return out;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ValueError("backward on undefined tensor");
  if (loss.numel() != 1) throw ShapeError("backward needs a scalar loss, got " + to_string(loss.shape()));
  auto root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS; a node met again while still on the stack is a cycle.
  enum class Mark : uint8_t { kOpen, kDone };
  std::unordered_map<detail::Node*, Mark> marks;
  std::vector<detail::Node*> order;
  std::vector<std::pair<detail::Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  marks[root.get()] = Mark::kOpen;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (!child->requires_grad) continue;
      auto it = marks.find(child);
      if (it == marks.end()) {
        marks[child] = Mark::kOpen;
        stack.emplace_back(child, 0);
      } else if (it->second == Mark::kOpen) {
        throw GraphError(std::string("cycle detected at op ") + child->op);
      }
    } else {
      marks[node] = Mark::kDone;
      order.push_back(node);
      stack.pop_back();
    }
  }

  detail::grad_buffer(*root)[0] += 1.0F;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

AllocationProbe::AllocationProbe() : previous_(g_largest_allocation.exchange(0)) {}
AllocationProbe::~AllocationProbe() { g_largest_allocation.store(previous_); }
int64_t AllocationProbe::largest() const { return g_largest_allocation.load(); }

}  // namespace cmseg
