#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value is a 2D array [rows, cols]; vectors are [1, n].
// The graph is rebuilt on every forward pass; parameters are long-lived
// leaf nodes whose gradients accumulate until explicitly cleared.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace novelgs {

using Real = double;

namespace ad {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

inline std::string to_string(Shape s) {
  return "[" + std::to_string(s.rows) + ", " + std::to_string(s.cols) + "]";
}

struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  std::vector<Real>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Shape shape, std::vector<Real> values) {
    if (values.size() != shape.size())
      throw std::invalid_argument("constant: value count does not match shape " + to_string(shape));
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value = std::move(values);
    return Var(std::move(n));
  }

  static Var zeros(Shape shape) { return constant(shape, std::vector<Real>(shape.size(), 0.0)); }

  static Var parameter(Shape shape, std::vector<Real> values) {
    Var v = constant(shape, std::move(values));
    v.node_->requires_grad = true;
    return v;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rows() const { return node_->shape.rows; }
  std::size_t cols() const { return node_->shape.cols; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const Real> value() const { return node_->value; }
  std::span<Real> mutable_value() { return node_->value; }
  Real operator()(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  Real item() const {
    if (size() != 1) throw std::logic_error("item: not a scalar " + to_string(shape()));
    return node_->value[0];
  }

  // Gradient buffer; zero-filled on first access.
  std::span<Real> grad() { return node_->ensure_grad(); }
  std::span<const Real> grad() const { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  ConstMatrixMap matrix() const {
    return ConstMatrixMap(node_->value.data(), static_cast<Eigen::Index>(rows()),
                          static_cast<Eigen::Index>(cols()));
  }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Creates an op result. The backward closure receives the result node and
// must add into its inputs' gradients (only those with requires_grad set).
inline Var make_op(Shape shape, std::vector<Real> value, std::vector<Var> inputs,
                   std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->value = std::move(value);
  for (auto& in : inputs) {
    if (in.requires_grad()) n->requires_grad = true;
    n->inputs.push_back(in.shared());
  }
  if (n->requires_grad) n->backward_fn = std::move(backward);
  return Var(std::move(n));
}

// Accumulates d(root)/d(leaf) into every reachable node with requires_grad.
inline void backward(const Var& root, Real seed = 1.0) {
  if (!root.requires_grad()) return;
  if (root.size() != 1) throw std::logic_error("backward: root must be a scalar");

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward_fn) continue;
    n->ensure_grad();
    n->backward_fn(*n);
    // Intermediate buffers are no longer needed once propagated.
    if (!n->inputs.empty()) std::vector<Real>().swap(n->grad);
  }
}

inline MatrixMap grad_map(Node& n) {
  auto& g = n.ensure_grad();
  return MatrixMap(g.data(), static_cast<Eigen::Index>(n.shape.rows),
                   static_cast<Eigen::Index>(n.shape.cols));
}

inline ConstMatrixMap value_map(const Node& n) {
  return ConstMatrixMap(n.value.data(), static_cast<Eigen::Index>(n.shape.rows),
                        static_cast<Eigen::Index>(n.shape.cols));
}

inline void require_shape(const Var& v, Shape expected, const char* op) {
  if (v.shape() != expected)
    throw std::invalid_argument(std::string(op) + ": expected shape " + to_string(expected) +
                                ", got " + to_string(v.shape()));
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions differ " + to_string(a.shape()) +
                                " x " + to_string(b.shape()));
  Shape out{a.rows(), b.cols()};
  std::vector<Real> value(out.size());
  MatrixMap(value.data(), out.rows, out.cols).noalias() = a.matrix() * b.matrix();
  return make_op(out, std::move(value), {a, b}, [](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    ConstMatrixMap g(self.grad.data(), self.shape.rows, self.shape.cols);
    if (na.requires_grad) grad_map(na).noalias() += g * value_map(nb).transpose();
    if (nb.requires_grad) grad_map(nb).noalias() += value_map(na).transpose() * g;
  });
}

// x[n, m] + v[1, m] broadcast over rows.
inline Var add_row(const Var& x, const Var& v) {
  require_shape(v, {1, x.cols()}, "add_row");
  std::vector<Real> value(x.value().begin(), x.value().end());
  const std::size_t m = x.cols();
  for (std::size_t i = 0; i < value.size(); ++i) value[i] += v.value()[i % m];
  return make_op(x.shape(), std::move(value), {x, v}, [m](Node& self) {
    Node& nx = *self.inputs[0];
    Node& nv = *self.inputs[1];
    if (nx.requires_grad) {
      auto& gx = nx.ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    }
    if (nv.requires_grad) {
      auto& gv = nv.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gv[i % m] += self.grad[i];
    }
  });
}

inline Var linear(const Var& x, const Var& weight, const Var& bias) {
  return add_row(matmul(x, weight), bias);
}

inline Var add(const Var& a, const Var& b) {
  require_shape(b, a.shape(), "add");
  std::vector<Real> value(a.size());
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = a.value()[i] + b.value()[i];
  return make_op(a.shape(), std::move(value), {a, b}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Var scale(const Var& x, Real factor) {
  std::vector<Real> value(x.size());
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = factor * x.value()[i];
  return make_op(x.shape(), std::move(value), {x}, [factor](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

// x[V*P, D] + pe[P, D], the same embedding added to every block of P rows.
inline Var add_tiled(const Var& x, const Var& pe) {
  if (pe.cols() != x.cols() || pe.rows() == 0 || x.rows() % pe.rows() != 0)
    throw std::invalid_argument("add_tiled: incompatible shapes " + to_string(x.shape()) + " and " +
                                to_string(pe.shape()));
  const std::size_t block = pe.size();
  std::vector<Real> value(x.value().begin(), x.value().end());
  for (std::size_t i = 0; i < value.size(); ++i) value[i] += pe.value()[i % block];
  return make_op(x.shape(), std::move(value), {x, pe}, [block](Node& self) {
    Node& nx = *self.inputs[0];
    Node& np = *self.inputs[1];
    if (nx.requires_grad) {
      auto& g = nx.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (np.requires_grad) {
      auto& g = np.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % block] += self.grad[i];
    }
  });
}

inline Var silu(const Var& x) {
  std::vector<Real> value(x.size());
  for (std::size_t i = 0; i < value.size(); ++i) {
    const Real v = x.value()[i];
    value[i] = v / (1.0 + std::exp(-v));
  }
  return make_op(x.shape(), std::move(value), {x}, [](Node& self) {
    Node& nx = *self.inputs[0];
    auto& g = nx.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Real v = nx.value[i];
      const Real s = 1.0 / (1.0 + std::exp(-v));
      g[i] += self.grad[i] * s * (1.0 + v * (1.0 - s));
    }
  });
}

// tanh approximation of GELU.
inline Var gelu(const Var& x) {
  constexpr Real k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr Real c = 0.044715;
  std::vector<Real> value(x.size());
  for (std::size_t i = 0; i < value.size(); ++i) {
    const Real v = x.value()[i];
    value[i] = 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v)));
  }
  return make_op(x.shape(), std::move(value), {x}, [](Node& self) {
    Node& nx = *self.inputs[0];
    auto& g = nx.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Real v = nx.value[i];
      const Real u = k * (v + c * v * v * v);
      const Real th = std::tanh(u);
      const Real du = k * (1.0 + 3.0 * c * v * v);
      g[i] += self.grad[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
    }
  });
}

// Row-wise layer normalization without affine parameters.
inline Var layer_norm(const Var& x, Real eps = 1e-6) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<Real> value(x.size());
  auto inv_std = std::make_shared<std::vector<Real>>(n);
  for (std::size_t r = 0; r < n; ++r) {
    const Real* row = x.value().data() + r * d;
    Real mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<Real>(d);
    const Real is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < d; ++c) value[r * d + c] = (row[c] - mean) * is;
  }
  return make_op(x.shape(), std::move(value), {x}, [n, d, inv_std](Node& self) {
    Node& nx = *self.inputs[0];
    auto& g = nx.ensure_grad();
    for (std::size_t r = 0; r < n; ++r) {
      const Real* y = self.value.data() + r * d;
      const Real* gy = self.grad.data() + r * d;
      Real mean_g = 0, mean_gy = 0;
      for (std::size_t c = 0; c < d; ++c) {
        mean_g += gy[c];
        mean_gy += gy[c] * y[c];
      }
      mean_g /= static_cast<Real>(d);
      mean_gy /= static_cast<Real>(d);
      for (std::size_t c = 0; c < d; ++c)
        g[r * d + c] += (*inv_std)[r] * (gy[c] - mean_g - y[c] * mean_gy);
    }
  });
}

// x * (1 + scale) + shift, with shift/scale of shape [1, d] broadcast over rows.
inline Var modulate(const Var& x, const Var& shift, const Var& scl) {
  const std::size_t d = x.cols();
  require_shape(shift, {1, d}, "modulate(shift)");
  require_shape(scl, {1, d}, "modulate(scale)");
  std::vector<Real> value(x.size());
  for (std::size_t i = 0; i < value.size(); ++i)
    value[i] = x.value()[i] * (1.0 + scl.value()[i % d]) + shift.value()[i % d];
  return make_op(x.shape(), std::move(value), {x, shift, scl}, [d](Node& self) {
    Node& nx = *self.inputs[0];
    Node& nsh = *self.inputs[1];
    Node& nsc = *self.inputs[2];
    const std::size_t total = self.grad.size();
    if (nx.requires_grad) {
      auto& g = nx.ensure_grad();
      for (std::size_t i = 0; i < total; ++i) g[i] += self.grad[i] * (1.0 + nsc.value[i % d]);
    }
    if (nsh.requires_grad) {
      auto& g = nsh.ensure_grad();
      for (std::size_t i = 0; i < total; ++i) g[i % d] += self.grad[i];
    }
    if (nsc.requires_grad) {
      auto& g = nsc.ensure_grad();
      for (std::size_t i = 0; i < total; ++i) g[i % d] += self.grad[i] * nx.value[i];
    }
  });
}

// x + gate * y with gate [1, d] broadcast over rows.
inline Var gated_residual(const Var& x, const Var& gate, const Var& y) {
  const std::size_t d = x.cols();
  require_shape(gate, {1, d}, "gated_residual(gate)");
  require_shape(y, x.shape(), "gated_residual(y)");
  std::vector<Real> value(x.size());
  for (std::size_t i = 0; i < value.size(); ++i)
    value[i] = x.value()[i] + gate.value()[i % d] * y.value()[i];
  return make_op(x.shape(), std::move(value), {x, gate, y}, [d](Node& self) {
    Node& nx = *self.inputs[0];
    Node& ng = *self.inputs[1];
    Node& ny = *self.inputs[2];
    const std::size_t total = self.grad.size();
    if (nx.requires_grad) {
      auto& g = nx.ensure_grad();
      for (std::size_t i = 0; i < total; ++i) g[i] += self.grad[i];
    }
    if (ng.requires_grad) {
      auto& g = ng.ensure_grad();
      for (std::size_t i = 0; i < total; ++i) g[i % d] += self.grad[i] * ny.value[i];
    }
    if (ny.requires_grad) {
      auto& g = ny.ensure_grad();
      for (std::size_t i = 0; i < total; ++i) g[i] += self.grad[i] * ng.value[i % d];
    }
  });
}

inline Var slice_cols(const Var& x, std::size_t start, std::size_t count) {
  if (start + count > x.cols()) throw std::out_of_range("slice_cols: range exceeds columns");
  const std::size_t n = x.rows(), m = x.cols();
  std::vector<Real> value(n * count);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < count; ++c) value[r * count + c] = x.value()[r * m + start + c];
  return make_op({n, count}, std::move(value), {x}, [n, m, start, count](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < count; ++c) g[r * m + start + c] += self.grad[r * count + c];
  });
}

inline Var slice_rows(const Var& x, std::size_t start, std::size_t count) {
  if (start + count > x.rows()) throw std::out_of_range("slice_rows: range exceeds rows");
  const std::size_t m = x.cols();
  std::vector<Real> value(x.value().begin() + static_cast<std::ptrdiff_t>(start * m),
                          x.value().begin() + static_cast<std::ptrdiff_t>((start + count) * m));
  return make_op({count, m}, std::move(value), {x}, [start, m](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[start * m + i] += self.grad[i];
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t m = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != m) throw std::invalid_argument("concat_rows: column counts differ");
    rows += p.rows();
  }
  std::vector<Real> value;
  value.reserve(rows * m);
  for (const auto& p : parts) value.insert(value.end(), p.value().begin(), p.value().end());
  return make_op({rows, m}, std::move(value), parts, [](Node& self) {
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      if (in->requires_grad) {
        auto& g = in->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
      }
      offset += in->value.size();
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t n = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) throw std::invalid_argument("concat_cols: row counts differ");
    cols += p.cols();
  }
  std::vector<Real> value(n * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < pc; ++c) value[r * cols + offset + c] = p.value()[r * pc + c];
    offset += pc;
  }
  return make_op({n, cols}, std::move(value), parts, [n, cols](Node& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      const std::size_t pc = in->shape.cols;
      if (in->requires_grad) {
        auto& g = in->ensure_grad();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < pc; ++c) g[r * pc + c] += self.grad[r * cols + off + c];
      }
      off += pc;
    }
  });
}

// Sum of all entries, as a [1, 1] value.
inline Var sum(const Var& x) {
  Real s = 0;
  for (Real v : x.value()) s += v;
  return make_op({1, 1}, {s}, {x}, [](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (auto& gi : g) gi += self.grad[0];
  });
}

inline Var add_scalars(const std::vector<Var>& terms) {
  Real s = 0;
  for (const auto& t : terms) s += t.item();
  return make_op({1, 1}, {s}, terms, [](Node& self) {
    for (auto& in : self.inputs)
      if (in->requires_grad) in->ensure_grad()[0] += self.grad[0];
  });
}

// Mean squared difference between x and a constant target of the same size.
inline Var mse(const Var& x, std::span<const Real> target) {
  if (target.size() != x.size()) throw std::invalid_argument("mse: size mismatch");
  const Real n = static_cast<Real>(x.size());
  Real s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real d = x.value()[i] - target[i];
    s += d * d;
  }
  auto tgt = std::make_shared<std::vector<Real>>(target.begin(), target.end());
  return make_op({1, 1}, {s / n}, {x}, [tgt, n](Node& self) {
    Node& nx = *self.inputs[0];
    auto& g = nx.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[0] * 2.0 * (nx.value[i] - (*tgt)[i]) / n;
  });
}

}  // namespace ad
}  // namespace novelgs
