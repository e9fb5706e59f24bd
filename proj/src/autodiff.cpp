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

#include "bar/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace bar::autodiff {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "{";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "}";
}

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> data) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return n;
}

/// Result node wired to its parents; requires_grad propagates. The backward
/// closure is attached only when grads are in play.
Tensor make_op(Shape shape, std::vector<double> data,
               std::vector<std::shared_ptr<Node>> parents,
               std::function<void(Node&)> backward) {
  auto n = make_node(std::move(shape), std::move(data));
  bool track = g_grad_enabled;
  if (track) {
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    track = any;
  }
  if (track) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor(n);
}

void check(bool ok, const char* msg) {
  if (!ok) throw DimensionError(msg);
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape) {
  auto n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(Shape shape, double value) {
  auto n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::scalar(double value) {
  return Tensor(make_node({1}, {value}));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size())
    throw DimensionError("from_data: value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  return Tensor(make_node(std::move(shape), std::move(values)));
}

Tensor Tensor::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  Tensor t = from_data(std::move(shape), std::move(values));
  t.set_requires_grad(requires_grad);
  return t;
}

double Tensor::item() const {
  if (!node_ || node_->data.size() != 1)
    throw ContractError("item(): tensor is not a scalar");
  return node_->data[0];
}

Tensor Tensor::detach() const {
  return Tensor(make_node(node_->shape, node_->data));
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.defined() && b.defined(), "matmul: undefined operand");
  const bool a_vec = a.rank() == 1;
  const bool b_vec = b.rank() == 1;
  check(a.rank() <= 2 && b.rank() <= 2 && a.rank() >= 1 && b.rank() >= 1,
        "matmul: operands must be rank 1 or 2");
  if (a_vec && b_vec)
    throw DimensionError("matmul: both operands rank-1; use dot()");

  const std::size_t m = a_vec ? 1 : a.dim(0);
  const std::size_t k = a_vec ? a.dim(0) : a.dim(1);
  const std::size_t kb = b_vec ? b.dim(0) : b.dim(0);
  const std::size_t n = b_vec ? 1 : b.dim(1);
  if (k != kb)
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));

  std::vector<double> out(m * n, 0.0);
  const auto* pa = a.data().data();
  const auto* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      if (av == 0.0) continue;
      const double* brow = pb + kk * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }

  Shape out_shape;
  if (a_vec)
    out_shape = {n};
  else if (b_vec)
    out_shape = {m};
  else
    out_shape = {m, n};

  auto an = a.ptr();
  auto bn = b.ptr();
  return make_op(std::move(out_shape), std::move(out), {an, bn},
                 [an, bn, m, k, n](Node& self) {
                   const double* g = self.grad.data();
                   if (an->requires_grad) {
                     an->ensure_grad();
                     double* ga = an->grad.data();
                     const double* pb = bn->data.data();
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t kk = 0; kk < k; ++kk) {
                         double acc = 0.0;
                         const double* grow = g + i * n;
                         const double* brow = pb + kk * n;
                         for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                         ga[i * k + kk] += acc;
                       }
                   }
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     double* gb = bn->grad.data();
                     const double* pa = an->data.data();
                     for (std::size_t kk = 0; kk < k; ++kk)
                       for (std::size_t i = 0; i < m; ++i) {
                         const double av = pa[i * k + kk];
                         if (av == 0.0) continue;
                         const double* grow = g + i * n;
                         double* brow = gb + kk * n;
                         for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                       }
                   }
                 });
}

// ---------------------------------------------------------------------------
// elementwise binary ops with leading-dimension broadcast of the rhs
// ---------------------------------------------------------------------------

namespace {

enum class BinKind { Add, Sub, Mul };

/// Shapes must match exactly, or b is rank-1 matching the row width of
/// rank-2 a (leading-dimension expansion).
Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind) {
  check(a.defined() && b.defined(), "binary op: undefined operand");
  const bool broadcast = a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0);
  if (!broadcast && a.shape() != b.shape())
    throw DimensionError("elementwise: shapes not broadcast-compatible, " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));

  const std::size_t n = a.size();
  const std::size_t w = broadcast ? b.size() : n;
  std::vector<double> out(n);
  const auto* pa = a.data().data();
  const auto* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double bv = pb[broadcast ? i % w : i];
    switch (kind) {
      case BinKind::Add: out[i] = pa[i] + bv; break;
      case BinKind::Sub: out[i] = pa[i] - bv; break;
      case BinKind::Mul: out[i] = pa[i] * bv; break;
    }
  }

  auto an = a.ptr();
  auto bn = b.ptr();
  return make_op(a.shape(), std::move(out), {an, bn},
                 [an, bn, kind, n, w, broadcast](Node& self) {
                   const double* g = self.grad.data();
                   if (an->requires_grad) {
                     an->ensure_grad();
                     double* ga = an->grad.data();
                     if (kind == BinKind::Mul) {
                       const double* pb = bn->data.data();
                       for (std::size_t i = 0; i < n; ++i)
                         ga[i] += g[i] * pb[broadcast ? i % w : i];
                     } else {
                       for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                     }
                   }
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     double* gb = bn->grad.data();
                     const double* pa = an->data.data();
                     for (std::size_t i = 0; i < n; ++i) {
                       const std::size_t j = broadcast ? i % w : i;
                       switch (kind) {
                         case BinKind::Add: gb[j] += g[i]; break;
                         case BinKind::Sub: gb[j] -= g[i]; break;
                         case BinKind::Mul: gb[j] += g[i] * pa[i]; break;
                       }
                     }
                   }
                 });
}

Tensor unary_op(const Tensor& x, std::function<double(double)> f,
                std::function<double(double, double)> df_from_x_y) {
  const std::size_t n = x.size();
  std::vector<double> out(n);
  const auto* px = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(px[i]);

  auto xn = x.ptr();
  auto y = make_op(x.shape(), std::move(out), {xn},
                   [xn, df = std::move(df_from_x_y)](Node& self) {
                     if (!xn->requires_grad) return;
                     xn->ensure_grad();
                     const double* g = self.grad.data();
                     const double* px = xn->data.data();
                     const double* py = self.data.data();
                     double* gx = xn->grad.data();
                     for (std::size_t i = 0; i < self.size(); ++i)
                       gx[i] += g[i] * df(px[i], py[i]);
                   });
  return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul); }

Tensor affine(const Tensor& x, double alpha, double beta) {
  const std::size_t n = x.size();
  std::vector<double> out(n);
  const auto* px = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = alpha * px[i] + beta;
  auto xn = x.ptr();
  return make_op(x.shape(), std::move(out), {xn}, [xn, alpha](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const double* g = self.grad.data();
    double* gx = xn->grad.data();
    for (std::size_t i = 0; i < self.size(); ++i) gx[i] += alpha * g[i];
  });
}

Tensor scale(const Tensor& x, double alpha) { return affine(x, alpha, 0.0); }

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary_op(x, [](double v) { return std::tanh(v); },
                  [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary_op(x, [](double v) { return v > 0.0 ? v : 0.0; },
                  [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(x, [](double v) { return std::exp(v); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(x, [](double v) { return std::log(v); },
                  [](double v, double) { return 1.0 / v; });
}

Tensor softmax(const Tensor& x) {
  check(x.defined() && x.rank() == 1, "softmax: rank-1 input required");
  const std::size_t n = x.size();
  if (n == 0) throw DimensionError("softmax: empty input");
  const auto* px = x.data().data();
  double mx = px[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, px[i]);
  std::vector<double> out(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(px[i] - mx);
    z += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] /= z;

  auto xn = x.ptr();
  return make_op(x.shape(), std::move(out), {xn}, [xn, n](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const double* g = self.grad.data();
    const double* y = self.data.data();
    double* gx = xn->grad.data();
    double dotgy = 0.0;
    for (std::size_t i = 0; i < n; ++i) dotgy += g[i] * y[i];
    for (std::size_t i = 0; i < n; ++i) gx[i] += y[i] * (g[i] - dotgy);
  });
}

Tensor l2_normalize(const Tensor& x) {
  check(x.defined() && x.rank() == 1, "l2_normalize: rank-1 input required");
  const std::size_t n = x.size();
  const auto* px = x.data().data();
  double sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) sq += px[i] * px[i];
  const double norm = std::sqrt(sq);
  std::vector<double> out(n, 0.0);
  if (norm > 0.0)
    for (std::size_t i = 0; i < n; ++i) out[i] = px[i] / norm;

  auto xn = x.ptr();
  return make_op(x.shape(), std::move(out), {xn}, [xn, norm, n](Node& self) {
    if (!xn->requires_grad || norm == 0.0) return;  // zero vector: zero gradient
    xn->ensure_grad();
    const double* g = self.grad.data();
    const double* y = self.data.data();
    double* gx = xn->grad.data();
    double gy = 0.0;
    for (std::size_t i = 0; i < n; ++i) gy += g[i] * y[i];
    for (std::size_t i = 0; i < n; ++i) gx[i] += (g[i] - y[i] * gy) / norm;
  });
}

Tensor mean_pool(const Tensor& rows) {
  check(rows.defined() && rows.rank() == 2, "mean_pool: rank-2 input required");
  const std::size_t m = rows.dim(0);
  const std::size_t d = rows.dim(1);
  std::vector<double> out(d, 0.0);
  const auto* p = rows.data().data();
  if (m > 0) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) out[j] += p[i * d + j];
    for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<double>(m);
  }
  auto rn = rows.ptr();
  return make_op({d}, std::move(out), {rn}, [rn, m, d](Node& self) {
    if (!rn->requires_grad || m == 0) return;
    rn->ensure_grad();
    const double* g = self.grad.data();
    double* gr = rn->grad.data();
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) gr[i * d + j] += g[j] * inv;
  });
}

Tensor sum(const Tensor& x) {
  check(x.defined(), "sum: undefined operand");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto xn = x.ptr();
  return make_op({1}, {acc}, {xn}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const double g = self.grad[0];
    for (auto& gv : xn->grad) gv += g;
  });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  check(a.defined() && b.defined(), "dot: undefined operand");
  check(a.rank() == 1 && b.rank() == 1, "dot: rank-1 operands required");
  if (a.size() != b.size())
    throw DimensionError("dot: length mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  const std::size_t n = a.size();
  const auto* pa = a.data().data();
  const auto* pb = b.data().data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += pa[i] * pb[i];
  auto an = a.ptr();
  auto bn = b.ptr();
  return make_op({1}, {acc}, {an, bn}, [an, bn, n](Node& self) {
    const double g = self.grad[0];
    if (an->requires_grad) {
      an->ensure_grad();
      const double* pb = bn->data.data();
      for (std::size_t i = 0; i < n; ++i) an->grad[i] += g * pb[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      const double* pa = an->data.data();
      for (std::size_t i = 0; i < n; ++i) bn->grad[i] += g * pa[i];
    }
  });
}

Tensor concat(std::span<const Tensor> parts) {
  check(!parts.empty(), "concat: no inputs");
  std::size_t total = 0;
  std::vector<std::shared_ptr<Node>> parents;
  parents.reserve(parts.size());
  for (const auto& t : parts) {
    check(t.defined() && t.rank() == 1, "concat: rank-1 inputs required");
    total += t.size();
    parents.push_back(t.ptr());
  }
  std::vector<double> out(total);
  std::size_t off = 0;
  for (const auto& t : parts) {
    std::copy(t.data().begin(), t.data().end(), out.begin() + off);
    off += t.size();
  }
  auto parents_copy = parents;
  return make_op({total}, std::move(out), std::move(parents),
                 [ps = std::move(parents_copy)](Node& self) {
                   const double* g = self.grad.data();
                   std::size_t off = 0;
                   for (const auto& p : ps) {
                     if (p->requires_grad) {
                       p->ensure_grad();
                       for (std::size_t i = 0; i < p->size(); ++i)
                         p->grad[i] += g[off + i];
                     }
                     off += p->size();
                   }
                 });
}

Tensor slice_rows(const Tensor& m, std::size_t r0, std::size_t r1) {
  check(m.defined() && m.rank() == 2, "slice_rows: rank-2 input required");
  if (r0 > r1 || r1 > m.dim(0))
    throw DimensionError("slice_rows: range [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") out of bounds for " +
                         std::to_string(m.dim(0)) + " rows");
  const std::size_t d = m.dim(1);
  const std::size_t rows = r1 - r0;
  std::vector<double> out(rows * d);
  std::copy(m.data().begin() + r0 * d, m.data().begin() + r1 * d, out.begin());
  auto mn = m.ptr();
  return make_op({rows, d}, std::move(out), {mn}, [mn, r0, rows, d](Node& self) {
    if (!mn->requires_grad) return;
    mn->ensure_grad();
    const double* g = self.grad.data();
    double* gm = mn->grad.data() + r0 * d;
    for (std::size_t i = 0; i < rows * d; ++i) gm[i] += g[i];
  });
}

Tensor row(const Tensor& m, std::size_t i) {
  check(m.defined() && m.rank() == 2, "row: rank-2 input required");
  if (i >= m.dim(0)) throw DimensionError("row: index out of range");
  const std::size_t d = m.dim(1);
  std::vector<double> out(m.data().begin() + i * d, m.data().begin() + (i + 1) * d);
  auto mn = m.ptr();
  return make_op({d}, std::move(out), {mn}, [mn, i, d](Node& self) {
    if (!mn->requires_grad) return;
    mn->ensure_grad();
    const double* g = self.grad.data();
    double* gm = mn->grad.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) gm[j] += g[j];
  });
}

Tensor transpose(const Tensor& m) {
  check(m.defined() && m.rank() == 2, "transpose: rank-2 input required");
  const std::size_t r = m.dim(0);
  const std::size_t c = m.dim(1);
  std::vector<double> out(r * c);
  const auto* p = m.data().data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = p[i * c + j];
  auto mn = m.ptr();
  return make_op({c, r}, std::move(out), {mn}, [mn, r, c](Node& self) {
    if (!mn->requires_grad) return;
    mn->ensure_grad();
    const double* g = self.grad.data();
    double* gm = mn->grad.data();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += g[j * r + i];
  });
}

Tensor pick(const Tensor& x, std::size_t i) {
  check(x.defined() && x.rank() == 1, "pick: rank-1 input required");
  if (i >= x.size()) throw DimensionError("pick: index out of range");
  auto xn = x.ptr();
  return make_op({1}, {x.data()[i]}, {xn}, [xn, i](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    xn->grad[i] += self.grad[0];
  });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0)
    throw ContractError("dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  const std::size_t n = x.size();
  const double keep = 1.0 - rate;
  std::vector<double> mask(n);
  for (std::size_t i = 0; i < n; ++i)
    mask[i] = rng.uniform() >= rate ? 1.0 / keep : 0.0;
  std::vector<double> out(n);
  const auto* px = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = px[i] * mask[i];
  auto xn = x.ptr();
  return make_op(x.shape(), std::move(out), {xn},
                 [xn, mask = std::move(mask)](Node& self) {
                   if (!xn->requires_grad) return;
                   xn->ensure_grad();
                   const double* g = self.grad.data();
                   for (std::size_t i = 0; i < self.size(); ++i)
                     xn->grad[i] += g[i] * mask[i];
                 });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward: loss must be a defined scalar");

  // Iterative post-order DFS; children are visited in parent-list order so
  // the sweep is deterministic.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  struct Frame {
    Node* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  Node* root = loss.node();
  stack.push_back({root, 0});
  seen.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node* p = f.node->parents[f.next_parent++].get();
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  // Fresh adjoints for interior nodes; leaves keep accumulating.
  for (Node* n : order)
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);

  root->ensure_grad();
  root->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

}  // namespace bar::autodiff
