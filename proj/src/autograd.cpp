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

#include "latdyn/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

#include "latdyn/common.hpp"

namespace latdyn::ag {

namespace {

std::atomic<std::uint64_t> g_node_counter{0};

NodePtr new_node(Mat value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->id = ++g_node_counter;
  return n;
}

void accum(Node& n, const Mat& g) {
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

bool any_grad(std::initializer_list<const Var*> xs) {
  for (const Var* x : xs)
    if ((*x).n->requires_grad) return true;
  return false;
}

bool any_tangent(std::initializer_list<const Var*> xs) {
  for (const Var* x : xs)
    if ((*x).n->has_tangent()) return true;
  return false;
}

// Tangent of x, materializing zeros when absent.
Mat tan_or_zero(const Var& x) {
  if (x.n->has_tangent()) return x.n->tangent;
  return Mat::Zero(x.rows(), x.cols());
}

void finish(const NodePtr& out, std::initializer_list<const Var*> parents,
            std::function<void(Node&)> backprop) {
  if (!any_grad(parents)) return;
  out->requires_grad = true;
  out->parents.reserve(parents.size());
  for (const Var* p : parents) out->parents.push_back((*p).n);
  out->backprop = std::move(backprop);
}

}  // namespace

double Var::scalar() const {
  check_shape(n && n->value.rows() == 1 && n->value.cols() == 1,
              "scalar() requires a 1x1 value");
  return n->value(0, 0);
}

std::uint64_t nodes_created() { return g_node_counter.load(); }

Var constant(Mat v) { return Var(new_node(std::move(v))); }

Var leaf(Mat v, bool requires_grad) {
  auto n = new_node(std::move(v));
  n->requires_grad = requires_grad;
  return Var(n);
}

Var with_tangent(const Var& x, Mat t) {
  check_shape(t.rows() == x.rows() && t.cols() == x.cols(),
              "with_tangent: tangent shape mismatch");
  auto out = new_node(x.val());
  out->tangent = std::move(t);
  finish(out, {&x}, [xp = x.n](Node& self) { accum(*xp, self.grad); });
  return Var(out);
}

Var detach(const Var& x) { return constant(x.val()); }

Var add(const Var& a, const Var& b) {
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  auto out = new_node(a.val() + b.val());
  if (any_tangent({&a, &b})) out->tangent = tan_or_zero(a) + tan_or_zero(b);
  finish(out, {&a, &b}, [ap = a.n, bp = b.n](Node& self) {
    accum(*ap, self.grad);
    accum(*bp, self.grad);
  });
  return Var(out);
}

Var sub(const Var& a, const Var& b) {
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  auto out = new_node(a.val() - b.val());
  if (any_tangent({&a, &b})) out->tangent = tan_or_zero(a) - tan_or_zero(b);
  finish(out, {&a, &b}, [ap = a.n, bp = b.n](Node& self) {
    accum(*ap, self.grad);
    accum(*bp, Mat(-self.grad));
  });
  return Var(out);
}

Var mul(const Var& a, const Var& b) {
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  auto out = new_node(a.val().cwiseProduct(b.val()));
  if (any_tangent({&a, &b}))
    out->tangent = tan_or_zero(a).cwiseProduct(b.val()) +
                   a.val().cwiseProduct(tan_or_zero(b));
  finish(out, {&a, &b}, [ap = a.n, bp = b.n](Node& self) {
    accum(*ap, self.grad.cwiseProduct(bp->value));
    accum(*bp, self.grad.cwiseProduct(ap->value));
  });
  return Var(out);
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
  auto out = new_node(a.val() * s);
  if (a.has_tangent()) out->tangent = a.tangent() * s;
  finish(out, {&a}, [ap = a.n, s](Node& self) { accum(*ap, Mat(self.grad * s)); });
  return Var(out);
}

Var add_scalar(const Var& a, double s) {
  auto out = new_node(a.val().array() + s);
  if (a.has_tangent()) out->tangent = a.tangent();
  finish(out, {&a}, [ap = a.n](Node& self) { accum(*ap, self.grad); });
  return Var(out);
}

Var gelu(const Var& x) {
  const Mat& v = x.val();
  const double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt2pi = 0.39894228040143267794;
  Mat phi = (0.5 * (1.0 + (v.array() * inv_sqrt2).erf())).matrix();
  Mat dens = (inv_sqrt2pi * (-0.5 * v.array().square()).exp()).matrix();
  Mat deriv = phi + v.cwiseProduct(dens);
  auto out = new_node(v.cwiseProduct(phi));
  if (x.has_tangent()) out->tangent = x.tangent().cwiseProduct(deriv);
  finish(out, {&x}, [xp = x.n, deriv](Node& self) {
    accum(*xp, self.grad.cwiseProduct(deriv));
  });
  return Var(out);
}

Var sigmoid(const Var& x) {
  Mat s = (1.0 / (1.0 + (-x.val().array()).exp())).matrix();
  Mat deriv = s.cwiseProduct((1.0 - s.array()).matrix());
  auto out = new_node(s);
  if (x.has_tangent()) out->tangent = x.tangent().cwiseProduct(deriv);
  finish(out, {&x}, [xp = x.n, deriv](Node& self) {
    accum(*xp, self.grad.cwiseProduct(deriv));
  });
  return Var(out);
}

Var matmul(const Var& a, const Var& b) {
  check_shape(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  auto out = new_node(a.val() * b.val());
  if (any_tangent({&a, &b}))
    out->tangent = tan_or_zero(a) * b.val() + a.val() * tan_or_zero(b);
  finish(out, {&a, &b}, [ap = a.n, bp = b.n](Node& self) {
    accum(*ap, Mat(self.grad * bp->value.transpose()));
    accum(*bp, Mat(ap->value.transpose() * self.grad));
  });
  return Var(out);
}

Var matmul_nt(const Var& a, const Var& b) {
  check_shape(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
  auto out = new_node(a.val() * b.val().transpose());
  if (any_tangent({&a, &b}))
    out->tangent = tan_or_zero(a) * b.val().transpose() +
                   a.val() * tan_or_zero(b).transpose();
  finish(out, {&a, &b}, [ap = a.n, bp = b.n](Node& self) {
    accum(*ap, Mat(self.grad * bp->value));
    accum(*bp, Mat(self.grad.transpose() * ap->value));
  });
  return Var(out);
}

Var transpose(const Var& a) {
  auto out = new_node(a.val().transpose());
  if (a.has_tangent()) out->tangent = a.tangent().transpose();
  finish(out, {&a}, [ap = a.n](Node& self) {
    accum(*ap, Mat(self.grad.transpose()));
  });
  return Var(out);
}

Var apply_fixed(const Mat& m, const Var& x) {
  check_shape(m.cols() == x.rows(), "apply_fixed: dimension mismatch");
  auto out = new_node(m * x.val());
  if (x.has_tangent()) out->tangent = m * x.tangent();
  finish(out, {&x}, [xp = x.n, m](Node& self) {
    accum(*xp, Mat(m.transpose() * self.grad));
  });
  return Var(out);
}

Var add_row_broadcast(const Var& x, const Var& row) {
  check_shape(row.rows() == 1 && row.cols() == x.cols(),
              "add_row_broadcast: row must be 1 x cols(x)");
  Mat v = x.val();
  v.rowwise() += row.val().row(0);
  auto out = new_node(std::move(v));
  if (any_tangent({&x, &row})) {
    Mat t = tan_or_zero(x);
    if (row.has_tangent()) t.rowwise() += row.tangent().row(0);
    out->tangent = std::move(t);
  }
  finish(out, {&x, &row}, [xp = x.n, rp = row.n](Node& self) {
    accum(*xp, self.grad);
    accum(*rp, Mat(self.grad.colwise().sum()));
  });
  return Var(out);
}

Var concat_rows(std::span<const Var> parts) {
  check(!parts.empty(), "concat_rows: no parts");
  Eigen::Index total = 0;
  const Eigen::Index cols = parts[0].cols();
  for (const Var& p : parts) {
    check_shape(p.cols() == cols, "concat_rows: column mismatch");
    total += p.rows();
  }
  Mat v(total, cols);
  Eigen::Index r = 0;
  bool want_tangent = false;
  for (const Var& p : parts) {
    v.middleRows(r, p.rows()) = p.val();
    r += p.rows();
    want_tangent = want_tangent || p.has_tangent();
  }
  auto out = new_node(std::move(v));
  if (want_tangent) {
    Mat t(total, cols);
    r = 0;
    for (const Var& p : parts) {
      t.middleRows(r, p.rows()) = tan_or_zero(p);
      r += p.rows();
    }
    out->tangent = std::move(t);
  }
  bool grad = false;
  for (const Var& p : parts) grad = grad || p.n->requires_grad;
  if (grad) {
    out->requires_grad = true;
    std::vector<NodePtr> ps;
    ps.reserve(parts.size());
    for (const Var& p : parts) ps.push_back(p.n);
    out->parents = ps;
    out->backprop = [ps](Node& self) {
      Eigen::Index r0 = 0;
      for (const auto& p : ps) {
        accum(*p, Mat(self.grad.middleRows(r0, p->value.rows())));
        r0 += p->value.rows();
      }
    };
  }
  return Var(out);
}

Var concat_rows(std::initializer_list<Var> parts) {
  std::vector<Var> v(parts);
  return concat_rows(std::span<const Var>(v));
}

Var slice_rows(const Var& x, Eigen::Index r0, Eigen::Index nrows) {
  check_shape(r0 >= 0 && nrows >= 0 && r0 + nrows <= x.rows(),
              "slice_rows: out of range");
  auto out = new_node(x.val().middleRows(r0, nrows));
  if (x.has_tangent()) out->tangent = x.tangent().middleRows(r0, nrows);
  finish(out, {&x}, [xp = x.n, r0, nrows](Node& self) {
    if (!xp->requires_grad) return;
    if (xp->grad.size() == 0) xp->grad = Mat::Zero(xp->value.rows(), xp->value.cols());
    xp->grad.middleRows(r0, nrows) += self.grad;
  });
  return Var(out);
}

Var concat_cols(std::span<const Var> parts) {
  check(!parts.empty(), "concat_cols: no parts");
  Eigen::Index total = 0;
  const Eigen::Index rows = parts[0].rows();
  for (const Var& p : parts) {
    check_shape(p.rows() == rows, "concat_cols: row mismatch");
    total += p.cols();
  }
  Mat v(rows, total);
  Eigen::Index c = 0;
  bool want_tangent = false;
  for (const Var& p : parts) {
    v.middleCols(c, p.cols()) = p.val();
    c += p.cols();
    want_tangent = want_tangent || p.has_tangent();
  }
  auto out = new_node(std::move(v));
  if (want_tangent) {
    Mat t(rows, total);
    c = 0;
    for (const Var& p : parts) {
      t.middleCols(c, p.cols()) = tan_or_zero(p);
      c += p.cols();
    }
    out->tangent = std::move(t);
  }
  bool grad = false;
  for (const Var& p : parts) grad = grad || p.n->requires_grad;
  if (grad) {
    out->requires_grad = true;
    std::vector<NodePtr> ps;
    ps.reserve(parts.size());
    for (const Var& p : parts) ps.push_back(p.n);
    out->parents = ps;
    out->backprop = [ps](Node& self) {
      Eigen::Index c0 = 0;
      for (const auto& p : ps) {
        accum(*p, Mat(self.grad.middleCols(c0, p->value.cols())));
        c0 += p->value.cols();
      }
    };
  }
  return Var(out);
}

Var slice_cols(const Var& x, Eigen::Index c0, Eigen::Index ncols) {
  check_shape(c0 >= 0 && ncols >= 0 && c0 + ncols <= x.cols(),
              "slice_cols: out of range");
  auto out = new_node(x.val().middleCols(c0, ncols));
  if (x.has_tangent()) out->tangent = x.tangent().middleCols(c0, ncols);
  finish(out, {&x}, [xp = x.n, c0, ncols](Node& self) {
    if (!xp->requires_grad) return;
    if (xp->grad.size() == 0) xp->grad = Mat::Zero(xp->value.rows(), xp->value.cols());
    xp->grad.middleCols(c0, ncols) += self.grad;
  });
  return Var(out);
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  check_shape(gamma.rows() == 1 && gamma.cols() == x.cols(),
              "layer_norm: gamma must be 1 x cols");
  check_shape(beta.rows() == 1 && beta.cols() == x.cols(),
              "layer_norm: beta must be 1 x cols");
  const Mat& v = x.val();
  const Eigen::Index n = v.rows(), c = v.cols();
  Eigen::VectorXd mean = v.rowwise().mean();
  Mat centered = v.colwise() - mean;
  Eigen::VectorXd var = centered.array().square().rowwise().mean();
  Eigen::VectorXd inv_sigma = (var.array() + eps).rsqrt();
  Mat y = centered.array().colwise() * inv_sigma.array();
  Mat outv = (y.array().rowwise() * gamma.val().row(0).array()).matrix();
  outv.rowwise() += beta.val().row(0);
  auto out = new_node(std::move(outv));

  if (any_tangent({&x, &gamma, &beta})) {
    Mat t = Mat::Zero(n, c);
    if (x.has_tangent()) {
      const Mat& xd = x.tangent();
      Eigen::VectorXd md = xd.rowwise().mean();
      Mat cd = xd.colwise() - md;
      Eigen::VectorXd proj = (y.cwiseProduct(xd)).rowwise().mean();
      Mat yd = (cd - (y.array().colwise() * proj.array()).matrix()).array().colwise() *
               inv_sigma.array();
      t = (yd.array().rowwise() * gamma.val().row(0).array()).matrix();
    }
    if (gamma.has_tangent())
      t += (y.array().rowwise() * gamma.tangent().row(0).array()).matrix();
    if (beta.has_tangent()) t.rowwise() += beta.tangent().row(0);
    out->tangent = std::move(t);
  }

  finish(out, {&x, &gamma, &beta},
         [xp = x.n, gp = gamma.n, bp = beta.n, y, inv_sigma](Node& self) {
           const Mat& g = self.grad;
           accum(*gp, Mat(g.cwiseProduct(y).colwise().sum()));
           accum(*bp, Mat(g.colwise().sum()));
           if (!xp->requires_grad) return;
           Mat g1 = (g.array().rowwise() * gp->value.row(0).array()).matrix();
           Eigen::VectorXd m1 = g1.rowwise().mean();
           Eigen::VectorXd m2 = (g1.cwiseProduct(y)).rowwise().mean();
           Mat dx = ((g1.colwise() - m1) - (y.array().colwise() * m2.array()).matrix())
                        .array()
                        .colwise() *
                    inv_sigma.array();
           accum(*xp, dx);
         });
  return Var(out);
}

Var softmax_rows(const Var& x) {
  const Mat& v = x.val();
  Eigen::VectorXd mx = v.rowwise().maxCoeff();
  Mat e = (v.colwise() - mx).array().exp();
  Eigen::VectorXd z = e.rowwise().sum();
  Mat p = e.array().colwise() / z.array();
  auto out = new_node(p);
  if (x.has_tangent()) {
    const Mat& xd = x.tangent();
    Eigen::VectorXd dot = (p.cwiseProduct(xd)).rowwise().sum();
    out->tangent = p.cwiseProduct(xd.colwise() - dot);
  }
  finish(out, {&x}, [xp = x.n, p](Node& self) {
    Eigen::VectorXd dot = (self.grad.cwiseProduct(p)).rowwise().sum();
    accum(*xp, Mat(p.cwiseProduct(self.grad.colwise() - dot)));
  });
  return Var(out);
}

Var log_softmax_rows(const Var& x) {
  const Mat& v = x.val();
  Eigen::VectorXd mx = v.rowwise().maxCoeff();
  Mat shifted = v.colwise() - mx;
  Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log();
  Mat y = shifted.colwise() - lse;
  Mat p = y.array().exp();
  auto out = new_node(y);
  if (x.has_tangent()) {
    const Mat& xd = x.tangent();
    Eigen::VectorXd dot = (p.cwiseProduct(xd)).rowwise().sum();
    out->tangent = xd.colwise() - dot;
  }
  finish(out, {&x}, [xp = x.n, p](Node& self) {
    Eigen::VectorXd rs = self.grad.rowwise().sum();
    accum(*xp, Mat(self.grad - (p.array().colwise() * rs.array()).matrix()));
  });
  return Var(out);
}

Var l2_normalize_rows(const Var& x, double eps) {
  const Mat& v = x.val();
  Eigen::VectorXd r = v.rowwise().norm();
  if (eps == 0.0) {
    for (Eigen::Index i = 0; i < r.size(); ++i)
      if (r(i) == 0.0)
        throw NumericError("l2_normalize_rows: zero-norm token at row " +
                           std::to_string(i));
  }
  Eigen::VectorXd n = r.array() + eps;
  Mat y = v.array().colwise() / n.array();
  auto out = new_node(y);
  if (x.has_tangent()) {
    const Mat& xd = x.tangent();
    Eigen::VectorXd dot = (v.cwiseProduct(xd)).rowwise().sum();
    Mat t = xd.array().colwise() / n.array();
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      if (r(i) > 0.0) t.row(i) -= v.row(i) * (dot(i) / (r(i) * n(i) * n(i)));
    }
    out->tangent = std::move(t);
  }
  finish(out, {&x}, [xp = x.n, v = x.val(), r, n](Node& self) {
    const Mat& g = self.grad;
    Eigen::VectorXd dot = (g.cwiseProduct(v)).rowwise().sum();
    Mat dx = g.array().colwise() / n.array();
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      if (r(i) > 0.0) dx.row(i) -= v.row(i) * (dot(i) / (r(i) * n(i) * n(i)));
    }
    accum(*xp, dx);
  });
  return Var(out);
}

Var sum_all(const Var& x) {
  Mat v(1, 1);
  v(0, 0) = x.val().sum();
  auto out = new_node(std::move(v));
  if (x.has_tangent()) {
    Mat t(1, 1);
    t(0, 0) = x.tangent().sum();
    out->tangent = std::move(t);
  }
  finish(out, {&x}, [xp = x.n](Node& self) {
    accum(*xp, Mat(Mat::Constant(xp->value.rows(), xp->value.cols(),
                                 self.grad(0, 0))));
  });
  return Var(out);
}

Var mean_all(const Var& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.rows() * x.cols()));
}

Var mean_over_rows(const Var& x) {
  const double inv = 1.0 / static_cast<double>(x.rows());
  auto out = new_node(Mat(x.val().colwise().sum() * inv));
  if (x.has_tangent()) out->tangent = Mat(x.tangent().colwise().sum() * inv);
  finish(out, {&x}, [xp = x.n, inv](Node& self) {
    accum(*xp, Mat(Mat::Ones(xp->value.rows(), 1) * (self.grad * inv)));
  });
  return Var(out);
}

void backward(const Var& root) {
  check(root.defined(), "backward: undefined root");
  check_shape(root.rows() == 1 && root.cols() == 1, "backward: root must be 1x1");
  if (!root.n->requires_grad) return;
  root.n->grad = Mat::Ones(1, 1);

  // Creation ids increase from inputs to outputs, so sorting the reachable
  // set by descending id is a valid reverse topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.n.get()};
  seen.insert(root.n.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->id > b->id; });
  for (Node* n : order) {
    if (n->backprop && n->grad.size() != 0) n->backprop(*n);
  }
}

}  // namespace latdyn::ag
