/*
 * Copyright 2026 The BAR Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bar/errors.hpp"
#include "bar/rng.hpp"

namespace bar::autodiff {

using Shape = std::vector<std::size_t>;

/// One value node in the computation graph. Grad buffers are allocated
/// lazily on first accumulation. Leaf nodes (no parents) keep their grads
/// across backward passes; interior nodes are re-zeroed by each pass.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::size_t size() const { return data.size(); }
  bool is_leaf() const { return parents.empty(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

/// Value-semantic handle to a graph node. Copying a Tensor aliases the node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from_data(Shape shape, std::vector<double> values);
  static Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }

  /// Scalar value; contract error unless size() == 1.
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

  /// Same values, detached from the graph.
  Tensor detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

/// A named learnable tensor.
struct Parameter {
  std::string name;
  Tensor tensor;
};

/// Thread-local switch: while disabled, ops compute forward values but attach
/// no backward closures, so rollout scoring costs no graph bookkeeping.
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Operations. All accept rank-1 or rank-2 tensors as documented; shape
// violations raise DimensionError.
// ---------------------------------------------------------------------------

/// Matrix product with rank-1 promotion: {m,k}x{k,n} -> {m,n},
/// {m,k}x{k} -> {m}, {k}x{k,n} -> {n}. Use dot() for two vectors.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Elementwise; b may be rank-1 broadcast over the rows of rank-2 a.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

/// alpha * x + beta, elementwise.
Tensor affine(const Tensor& x, double alpha, double beta);
Tensor scale(const Tensor& x, double alpha);

Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

/// Rank-1 softmax with max subtraction; backward is the full
/// Jacobian-vector product.
Tensor softmax(const Tensor& x);

/// Rank-1 L2 normalization. The zero vector maps to the zero vector and
/// contributes zero gradient.
Tensor l2_normalize(const Tensor& x);

/// Column mean of a rank-2 tensor {M,d} -> {d}. M == 0 yields the zero
/// vector (and no gradient), matching the empty-segment pooling rule.
Tensor mean_pool(const Tensor& rows);

/// Sum of all elements -> {1}.
Tensor sum(const Tensor& x);

/// Inner product of two rank-1 tensors -> {1}.
Tensor dot(const Tensor& a, const Tensor& b);

/// Concatenation of rank-1 tensors.
Tensor concat(std::span<const Tensor> parts);

/// Rows [r0, r1) of a rank-2 tensor; r0 == r1 gives an empty {0,d} tensor.
Tensor slice_rows(const Tensor& m, std::size_t r0, std::size_t r1);

/// Row i of a rank-2 tensor -> {d}.
Tensor row(const Tensor& m, std::size_t i);

/// Rank-2 transpose.
Tensor transpose(const Tensor& m);

/// Element i of a rank-1 tensor -> {1}.
Tensor pick(const Tensor& x, std::size_t i);

/// Inverted dropout. Identity when training is false or rate is 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training);

/// Reverse-mode sweep from a scalar loss. Visits each reachable node exactly
/// once in reverse topological order; leaf grads accumulate across calls,
/// interior grads are per-pass.
void backward(const Tensor& loss);

}  // namespace bar::autodiff
