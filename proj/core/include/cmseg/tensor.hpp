#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmseg {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

class GraphError : public Error {
 public:
  using Error::Error;
};

namespace detail {
struct Node;
}

/// Dense float32 array with shape metadata and an optional gradient buffer.
///
/// A Tensor is a cheap handle; copies share the same node. Values are
/// immutable once an op has produced them. Leaves (tensors built directly
/// rather than by an op) may be mutated through mutable_data(), which is how
/// parameters get initialised and updated by optimisers.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0F);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor scalar(float value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t rank() const { return static_cast<int64_t>(shape().size()); }
  int64_t dim(int64_t axis) const;
  int64_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();
  std::vector<float> to_vector() const;
  float item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;

  /// Gradient buffer; zeros when no gradient has reached this tensor.
  std::vector<float> grad() const;
  bool has_grad() const;
  void zero_grad();

  /// New leaf sharing this tensor's storage, with no history and no grad.
  Tensor detach() const;
  /// Deep copy into a fresh leaf.
  Tensor clone() const;

  bool same(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Reverse-mode accumulation from a scalar. Gradients add into every
/// participating tensor that requires grad.
void backward(const Tensor& loss);

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Tracks the largest single tensor buffer allocated while alive.
/// Used to assert that code paths never materialise quadratic buffers.
class AllocationProbe {
 public:
  AllocationProbe();
  ~AllocationProbe();
  AllocationProbe(const AllocationProbe&) = delete;
  AllocationProbe& operator=(const AllocationProbe&) = delete;

  int64_t largest() const;

 private:
  int64_t previous_;
};

}  // namespace cmseg
