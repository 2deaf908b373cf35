// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ssmfuse {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

/// Storage plus the taped operation that produced it. A node with an empty
/// `backward` is a leaf.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::uint64_t seq = 0;  // creation order; producers always precede consumers
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  // Returns the gradient buffer, allocating zeros on first use.
  std::span<double> grad_buffer();
};

}  // namespace detail

/// Dense row-major float64 array with optional reverse-mode tracking.
///
/// A Tensor is a cheap handle; copies share storage. Operations in ops.hpp
/// record themselves on the graph whenever gradient mode is on and any input
/// requires a gradient. `backward()` walks the recorded operations in reverse
/// creation order and then releases the graph.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from(std::initializer_list<double> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Mutable access to the values; only valid on leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  bool is_leaf() const;
  /// Same values, no history.
  Tensor detach() const;
  /// Independent copy of the values.
  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  /// Builds an operation result. Records `parents` and `backward` only when
  /// gradient mode is enabled and some parent requires a gradient.
  static Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backward);

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;
};

/// Accumulates d(loss)/d(t) into every reachable tensor that requires a
/// gradient. Gradients add onto existing buffers. Throws ContractError when
/// `loss` has more than one element.
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

}  // namespace ssmfuse
