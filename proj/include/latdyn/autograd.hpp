// Copyright (c) 2026, latdyn contributors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef LATDYN_AUTOGRAD_HPP_
#define LATDYN_AUTOGRAD_HPP_

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace latdyn::ag {

using Mat = Eigen::MatrixXd;

// One value in a dynamically built computation graph. Values are 2D matrices
// in double precision; token sequences are (tokens x channels). Nodes carry
// an optional forward-mode tangent alongside the value, so a single forward
// pass yields both the primal and its directional derivative.
struct Node {
  Mat value;
  Mat grad;     // allocated on first accumulation during backward()
  Mat tangent;  // empty means structurally zero
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // pushes this->grad into parents

  bool has_tangent() const { return tangent.size() != 0; }
};

using NodePtr = std::shared_ptr<Node>;

// Cheap handle; copies share the underlying node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : n(std::move(node)) {}

  bool defined() const { return n != nullptr; }
  const Mat& val() const { return n->value; }
  const Mat& grad() const { return n->grad; }
  const Mat& tangent() const { return n->tangent; }
  bool has_tangent() const { return n && n->has_tangent(); }
  Eigen::Index rows() const { return n->value.rows(); }
  Eigen::Index cols() const { return n->value.cols(); }
  double scalar() const;  // value of a 1x1 node

  NodePtr n;
};

// Leaves.
Var constant(Mat v);
Var leaf(Mat v, bool requires_grad);
// Identity with the tangent replaced; grad flows through unchanged.
Var with_tangent(const Var& x, Mat t);
// Value copy severed from the graph (no grad, no tangent).
Var detach(const Var& x);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // Hadamard
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var gelu(const Var& x);
Var sigmoid(const Var& x);

// Linear algebra.
Var matmul(const Var& a, const Var& b);     // a * b
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var transpose(const Var& a);
// Fixed (non-learned) linear operator on the token axis: out = M * x.
Var apply_fixed(const Mat& m, const Var& x);
// X + ones * row, row is 1 x C (bias broadcast over tokens).
Var add_row_broadcast(const Var& x, const Var& row);

// Structure.
Var concat_rows(std::span<const Var> parts);
Var concat_rows(std::initializer_list<Var> parts);
Var slice_rows(const Var& x, Eigen::Index r0, Eigen::Index nrows);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(const Var& x, Eigen::Index c0, Eigen::Index ncols);

// Row-wise (per-token) transforms.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);
Var softmax_rows(const Var& x);
Var log_softmax_rows(const Var& x);
// y_i = x_i / (||x_i||_2 + eps). eps == 0 is exact mode and throws
// NumericError on a zero-norm row.
Var l2_normalize_rows(const Var& x, double eps);

// Reductions.
Var sum_all(const Var& x);   // 1x1
Var mean_all(const Var& x);  // 1x1
Var mean_over_rows(const Var& x);  // 1xC column means

// Runs reverse mode from a 1x1 root, accumulating into .grad of every
// reachable node with requires_grad.
void backward(const Var& root);

// Number of graph nodes created so far (diagnostics).
std::uint64_t nodes_created();

}  // namespace latdyn::ag

#endif  // LATDYN_AUTOGRAD_HPP_
