#pragma once

// Dense double-precision arrays, a reverse-mode tape, and the primitive
// operations the context-graph model is built from.
//
// Every array is at most two-dimensional. Rank-1 arrays behave as column
// vectors (n x 1). A Tensor is a shared handle to a tape node: copying a
// Tensor aliases the same value and gradient.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cag/log.hpp"
#include "cag/rng.hpp"

namespace cag {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

class Array {
 public:
  Array() = default;

  Array(std::size_t rows, std::size_t cols, double fill = 0.0)
      : Array(Shape{rows, cols}, fill) {}

  explicit Array(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    if (shape_.empty() || shape_.size() > 2)
      throw ShapeError("Array: rank must be 1 or 2, got shape " + shape_string(shape_));
    for (std::size_t e : shape_)
      if (e == 0) throw ShapeError("Array: zero extent in shape " + shape_string(shape_));
    data_.assign(product(shape_), fill);
  }

  Array(Shape shape, std::vector<double> values) : Array(std::move(shape)) {
    if (values.size() != data_.size())
      throw ShapeError("Array: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_string(shape_));
    data_ = std::move(values);
  }

  static Array column(std::vector<double> values) {
    const std::size_t n = values.size();
    return Array(Shape{n, 1}, std::move(values));
  }
  static Array row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Array(Shape{1, n}, std::move(values));
  }
  static Array scalar(double v) { return Array(Shape{1, 1}, std::vector<double>{v}); }
  static Array identity(std::size_t n) {
    Array a(n, n);
    for (std::size_t i = 0; i < n; ++i) a(i, i) = 1.0;
    return a;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() >= 2 ? shape_[1] : (shape_.empty() ? 0 : 1); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Array& operator+=(const Array& o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  bool same_shape(const Array& o) const { return rows() == o.rows() && cols() == o.cols(); }

  void require_same(const Array& o, std::string_view op) const {
    if (!same_shape(o))
      throw ShapeError(std::string(op) + ": shape " + shape_string(shape_) +
                       " does not match " + shape_string(o.shape_));
  }

  /// Bitwise equality of shape and values.
  friend bool operator==(const Array& a, const Array& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  static std::size_t product(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Array& a, const Array& b) {
  a.require_same(b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool all_finite(const Array& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Tape

namespace detail {
inline thread_local bool grad_enabled_flag = true;
}

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag) { detail::grad_enabled_flag = false; }
  ~NoGradGuard() { detail::grad_enabled_flag = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag; }

struct TapeNode {
  Array value;
  Array grad;  // empty until something flows in
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<TapeNode>> inputs;
  // Reads this node's grad and accumulates into the inputs that require it.
  std::function<void(TapeNode&)> backward_fn;

  void accumulate(const Array& g) {
    if (!requires_grad) return;
    if (grad.empty()) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

class Tensor {
 public:
  Tensor() : node_(std::make_shared<TapeNode>()) {}
  explicit Tensor(Array value, bool requires_grad = false) : Tensor() {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Tensor(std::shared_ptr<TapeNode> node) : node_(std::move(node)) {}

  static Tensor parameter(Array value) { return Tensor(std::move(value), true); }
  static Tensor constant(Array value) { return Tensor(std::move(value), false); }

  const Array& value() const { return node_->value; }
  Array& mutable_value() { return node_->value; }
  const Array& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }

  /// Sets the gradient slot to zeros of the value's shape.
  void zero_grad() { node_->grad = Array(node_->value.shape(), 0.0); }

  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  std::size_t size() const { return node_->value.size(); }
  double item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + shape_string(shape()) + " is not a scalar");
    return node_->value[0];
  }
  double operator()(std::size_t r, std::size_t c) const { return node_->value(r, c); }

  const std::shared_ptr<TapeNode>& node() const { return node_; }
  std::string_view op() const { return node_->op; }

 private:
  std::shared_ptr<TapeNode> node_;
};

namespace detail {

inline Tensor make_result(Array value, std::string_view op, std::vector<Tensor> inputs,
                          std::function<void(TapeNode&)> backward_fn) {
  auto node = std::make_shared<TapeNode>();
  node->value = std::move(value);
  node->op = op;
  bool any = false;
  if (cag::grad_enabled())
    for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const Tensor& t : inputs) node->inputs.push_back(t.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

inline void require_matrix_shape(const Tensor& a, std::size_t rows, std::size_t cols, std::string_view op) {
  if (a.rows() != rows || a.cols() != cols)
    throw ShapeError(std::string(op) + ": expected shape " + shape_string({rows, cols}) + ", got " +
                     shape_string(a.shape()));
}

}  // namespace detail

/// Runs reverse-mode propagation from a scalar loss. Each reachable node is
/// visited once, in reverse topological order; leaf gradients accumulate
/// across calls until zero_grad.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<TapeNode*> order;
  std::unordered_set<TapeNode*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<TapeNode*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TapeNode* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->accumulate(Array::scalar(1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TapeNode* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------------------
// Primitives

namespace detail {

// out(n x m) += a(n x k) * b(k x m), all row-major.
inline void gemm_nn(const double* a, const double* b, double* out, std::size_t n, std::size_t k, std::size_t m) {
  if (m == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* ai = a + i * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * b[p];
      out[i] += s;
    }
    return;
  }
  for (std::size_t i = 0; i < n; ++i) {
    double* oi = out + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) oi[j] += aip * bp[j];
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: shape " + shape_string(a.shape()) + " incompatible with " +
                     shape_string(b.shape()));
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Array out(n, m);
  detail::gemm_nn(a.value().data().data(), b.value().data().data(), out.data().data(), n, k, m);
  return detail::make_result(std::move(out), "matmul", {a, b}, [n, k, m](TapeNode& self) {
    TapeNode& an = *self.inputs[0];
    TapeNode& bn = *self.inputs[1];
    const double* g = self.grad.data().data();
    const double* av = an.value.data().data();
    const double* bv = bn.value.data().data();
    if (an.requires_grad) {
      // ga = g * b^T
      Array ga(n, k);
      double* gp = ga.data().data();
      for (std::size_t i = 0; i < n; ++i) {
        const double* gi = g + i * m;
        double* out = gp + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const double* bp = bv + p * m;
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += gi[j] * bp[j];
          out[p] = s;
        }
      }
      an.accumulate(ga);
    }
    if (bn.requires_grad) {
      // gb = a^T * g
      Array gb(k, m);
      double* gp = gb.data().data();
      for (std::size_t i = 0; i < n; ++i) {
        const double* ai = av + i * k;
        const double* gi = g + i * m;
        if (m == 1) {
          const double gi0 = gi[0];
          if (gi0 == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) gp[p] += ai[p] * gi0;
          continue;
        }
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = ai[p];
          if (aip == 0.0) continue;
          double* out = gp + p * m;
          for (std::size_t j = 0; j < m; ++j) out[j] += aip * gi[j];
        }
      }
      bn.accumulate(gb);
    }
  });
}

inline Array transpose(const Array& a) {
  Array out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline Tensor transpose(const Tensor& a) {
  return detail::make_result(transpose(a.value()), "transpose", {a}, [](TapeNode& self) {
    self.inputs[0]->accumulate(transpose(self.grad));
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  a.value().require_same(b.value(), "add");
  Array out = a.value();
  out += b.value();
  return detail::make_result(std::move(out), "add", {a, b}, [](TapeNode& self) {
    self.inputs[0]->accumulate(self.grad);
    self.inputs[1]->accumulate(self.grad);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  a.value().require_same(b.value(), "sub");
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::make_result(std::move(out), "sub", {a, b}, [](TapeNode& self) {
    self.inputs[0]->accumulate(self.grad);
    if (self.inputs[1]->requires_grad) {
      Array g = self.grad;
      for (double& v : g.data()) v = -v;
      self.inputs[1]->accumulate(g);
    }
  });
}

/// Elementwise product.
inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  a.value().require_same(b.value(), "hadamard");
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_result(std::move(out), "hadamard", {a, b}, [](TapeNode& self) {
    for (int side = 0; side < 2; ++side) {
      TapeNode& in = *self.inputs[side];
      if (!in.requires_grad) continue;
      const Array& other = self.inputs[1 - side]->value;
      Array g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= other[i];
      in.accumulate(g);
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  Array out = a.value();
  for (double& v : out.data()) v *= s;
  return detail::make_result(std::move(out), "scale", {a}, [s](TapeNode& self) {
    Array g = self.grad;
    for (double& v : g.data()) v *= s;
    self.inputs[0]->accumulate(g);
  });
}

/// Repeats a column vector across `n` columns: col * 1^T.
inline Tensor broadcast_cols(const Tensor& col, std::size_t n) {
  if (col.cols() != 1)
    throw ShapeError("broadcast_cols: expected a column vector, got " + shape_string(col.shape()));
  if (n == 0) throw ShapeError("broadcast_cols: zero column count");
  const std::size_t r = col.rows();
  Array out(r, n);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = col.value()[i];
  return detail::make_result(std::move(out), "broadcast_cols", {col}, [r, n](TapeNode& self) {
    Array g(r, 1);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i] += self.grad(i, j);
    self.inputs[0]->accumulate(g);
  });
}

inline Tensor tanh(const Tensor& a) {
  Array out = a.value();
  for (double& v : out.data()) v = std::tanh(v);
  return detail::make_result(out, "tanh", {a}, [out](TapeNode& self) {
    Array g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - out[i] * out[i];
    self.inputs[0]->accumulate(g);
  });
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  Array out = a.value();
  for (double& v : out.data()) v = sigmoid(v);
  return detail::make_result(out, "sigmoid", {a}, [out](TapeNode& self) {
    Array g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= out[i] * (1.0 - out[i]);
    self.inputs[0]->accumulate(g);
  });
}

/// axis 0 sums down each column (result 1 x cols); axis 1 sums along each row
/// (result rows x 1).
inline Tensor sum(const Tensor& a, int axis) {
  const std::size_t r = a.rows(), c = a.cols();
  if (axis != 0 && axis != 1) throw ShapeError("sum: axis must be 0 or 1");
  Array out = axis == 0 ? Array(1, c) : Array(r, 1);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += a.value()(i, j);
  return detail::make_result(std::move(out), "sum", {a}, [r, c, axis](TapeNode& self) {
    Array g(r, c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g(i, j) = self.grad[axis == 0 ? j : i];
    self.inputs[0]->accumulate(g);
  });
}

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const Shape shape = a.shape();
  return detail::make_result(Array::scalar(s), "sum_all", {a}, [shape](TapeNode& self) {
    self.inputs[0]->accumulate(Array(shape, self.grad[0]));
  });
}

/// axis 0 stacks vertically ([a; b]), axis 1 side by side ([a, b]).
inline Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  std::size_t total = 0;
  const std::size_t fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
  for (const Tensor& p : parts) {
    const std::size_t other = axis == 0 ? p.cols() : p.rows();
    if (other != fixed)
      throw ShapeError("concat: shape " + shape_string(parts[0].shape()) + " incompatible with " +
                       shape_string(p.shape()) + " along axis " + std::to_string(axis));
    total += axis == 0 ? p.rows() : p.cols();
  }
  Array out = axis == 0 ? Array(total, fixed) : Array(fixed, total);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    const Array& v = p.value();
    for (std::size_t i = 0; i < v.rows(); ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) {
        if (axis == 0)
          out(off + i, j) = v(i, j);
        else
          out(i, off + j) = v(i, j);
      }
    off += axis == 0 ? v.rows() : v.cols();
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return detail::make_result(std::move(out), "concat", std::move(inputs),
                             [offsets, axis](TapeNode& self) {
                               for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                                 TapeNode& in = *self.inputs[k];
                                 if (!in.requires_grad) continue;
                                 Array g(in.value.shape());
                                 for (std::size_t i = 0; i < g.rows(); ++i)
                                   for (std::size_t j = 0; j < g.cols(); ++j)
                                     g(i, j) = axis == 0 ? self.grad(offsets[k] + i, j)
                                                         : self.grad(i, offsets[k] + j);
                                 in.accumulate(g);
                               }
                             });
}

inline Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

/// Rows [begin, end).
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.rows())
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") outside shape " + shape_string(a.shape()));
  const std::size_t c = a.cols();
  Array out(end - begin, c);
  for (std::size_t i = begin; i < end; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i - begin, j) = a.value()(i, j);
  const Shape shape = a.shape();
  return detail::make_result(std::move(out), "slice_rows", {a}, [shape, begin](TapeNode& self) {
    Array g(shape);
    for (std::size_t i = 0; i < self.grad.rows(); ++i)
      for (std::size_t j = 0; j < self.grad.cols(); ++j) g(begin + i, j) = self.grad(i, j);
    self.inputs[0]->accumulate(g);
  });
}

inline Tensor column(const Tensor& a, std::size_t j) {
  if (j >= a.cols())
    throw ShapeError("column: index " + std::to_string(j) + " outside shape " + shape_string(a.shape()));
  const std::size_t r = a.rows();
  Array out(r, 1);
  for (std::size_t i = 0; i < r; ++i) out[i] = a.value()(i, j);
  const Shape shape = a.shape();
  return detail::make_result(std::move(out), "column", {a}, [shape, j](TapeNode& self) {
    Array g(shape);
    for (std::size_t i = 0; i < g.rows(); ++i) g(i, j) = self.grad[i];
    self.inputs[0]->accumulate(g);
  });
}

/// Element (r, c) as a 1x1 tensor.
inline Tensor element(const Tensor& a, std::size_t r, std::size_t c) {
  if (r >= a.rows() || c >= a.cols())
    throw ShapeError("element: index outside shape " + shape_string(a.shape()));
  const Shape shape = a.shape();
  return detail::make_result(Array::scalar(a.value()(r, c)), "element", {a}, [shape, r, c](TapeNode& self) {
    Array g(shape);
    g(r, c) = self.grad[0];
    self.inputs[0]->accumulate(g);
  });
}

/// Column j of the result is row ids[j] of `table`; ids equal to `pad_id`
/// produce a zero column.
inline Tensor embedding(const Tensor& table, std::span<const std::size_t> ids, std::size_t pad_id = 0) {
  if (ids.empty()) throw ShapeError("embedding: empty id sequence");
  const std::size_t vocab = table.rows(), dim = table.cols();
  for (std::size_t id : ids)
    if (id >= vocab)
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(vocab));
  Array out(dim, ids.size());
  for (std::size_t j = 0; j < ids.size(); ++j) {
    if (ids[j] == pad_id) continue;
    for (std::size_t k = 0; k < dim; ++k) out(k, j) = table.value()(ids[j], k);
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return detail::make_result(std::move(out), "embedding", {table},
                             [idv, pad_id, vocab, dim](TapeNode& self) {
                               Array g(vocab, dim);
                               for (std::size_t j = 0; j < idv.size(); ++j) {
                                 if (idv[j] == pad_id) continue;
                                 for (std::size_t k = 0; k < dim; ++k) g(idv[j], k) += self.grad(k, j);
                               }
                               self.inputs[0]->accumulate(g);
                             });
}

/// Inverted dropout. Identity when `train` is false or keep_prob is 1.
inline Tensor dropout(const Tensor& a, double keep_prob, Rng* rng, bool train) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0))
    throw std::invalid_argument("dropout: keep probability must lie in (0, 1], got " + std::to_string(keep_prob));
  if (!train || keep_prob == 1.0) return a;
  if (rng == nullptr) throw std::invalid_argument("dropout: training mode requires an rng");
  Array mask(a.shape());
  for (double& m : mask.data()) m = rng->bernoulli(keep_prob) ? 1.0 / keep_prob : 0.0;
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return detail::make_result(std::move(out), "dropout", {a}, [mask](TapeNode& self) {
    Array g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= mask[i];
    self.inputs[0]->accumulate(g);
  });
}

namespace detail {

// Calls fn(indices) for every slice along `axis`: axis 0 walks each column,
// axis 1 each row.
template <typename Fn>
void for_each_slice(std::size_t rows, std::size_t cols, int axis, Fn&& fn) {
  if (axis == 0) {
    std::vector<std::size_t> idx(rows);
    for (std::size_t j = 0; j < cols; ++j) {
      for (std::size_t i = 0; i < rows; ++i) idx[i] = i * cols + j;
      fn(idx);
    }
  } else {
    std::vector<std::size_t> idx(cols);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) idx[j] = i * cols + j;
      fn(idx);
    }
  }
}

inline Tensor softmax_impl(const Tensor& x, int axis, const Array* mask) {
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
  if (mask != nullptr) x.value().require_same(*mask, "masked_softmax");
  const Array& xv = x.value();
  Array out(xv.shape());
  for_each_slice(xv.rows(), xv.cols(), axis, [&](const std::vector<std::size_t>& idx) {
    double mx = -std::numeric_limits<double>::infinity();
    std::size_t live = 0;
    for (std::size_t k : idx) {
      if (mask != nullptr && (*mask)[k] == 0.0) continue;
      mx = std::max(mx, xv[k]);
      ++live;
    }
    if (live == 0) throw ShapeError("softmax: empty axis (every entry masked)");
    double total = 0.0;
    for (std::size_t k : idx) {
      if (mask != nullptr && (*mask)[k] == 0.0) continue;
      out[k] = std::exp(xv[k] - mx);
      total += out[k];
    }
    for (std::size_t k : idx) out[k] /= total;
  });
  return make_result(out, mask ? "masked_softmax" : "softmax", {x}, [out, axis](TapeNode& self) {
    Array g(out.shape());
    for_each_slice(out.rows(), out.cols(), axis, [&](const std::vector<std::size_t>& idx) {
      double dot = 0.0;
      for (std::size_t k : idx) dot += out[k] * self.grad[k];
      for (std::size_t k : idx) g[k] = out[k] * (self.grad[k] - dot);
    });
    self.inputs[0]->accumulate(g);
  });
}

}  // namespace detail

/// Softmax along `axis` (0: each column sums to 1, 1: each row sums to 1),
/// computed with max-subtraction.
inline Tensor softmax(const Tensor& x, int axis) { return detail::softmax_impl(x, axis, nullptr); }

/// Softmax restricted to entries where mask != 0; masked entries are exactly
/// zero and receive no gradient.
inline Tensor masked_softmax(const Tensor& x, int axis, const Array& mask) {
  return detail::softmax_impl(x, axis, &mask);
}

inline constexpr double kL2Epsilon = 1e-12;

/// Scales every slice along `axis` to unit norm, norm = sqrt(sum x^2 + eps).
inline Tensor l2_normalize(const Tensor& x, int axis) {
  if (axis != 0 && axis != 1) throw ShapeError("l2_normalize: axis must be 0 or 1");
  const Array& xv = x.value();
  Array out(xv.shape());
  Array norms(xv.shape());
  detail::for_each_slice(xv.rows(), xv.cols(), axis, [&](const std::vector<std::size_t>& idx) {
    double ss = 0.0;
    for (std::size_t k : idx) ss += xv[k] * xv[k];
    const double n = std::sqrt(ss + kL2Epsilon);
    for (std::size_t k : idx) {
      out[k] = xv[k] / n;
      norms[k] = n;
    }
  });
  return detail::make_result(out, "l2_normalize", {x}, [out, norms, axis](TapeNode& self) {
    Array g(out.shape());
    detail::for_each_slice(out.rows(), out.cols(), axis, [&](const std::vector<std::size_t>& idx) {
      double dot = 0.0;
      for (std::size_t k : idx) dot += out[k] * self.grad[k];
      for (std::size_t k : idx) g[k] = (self.grad[k] - out[k] * dot) / norms[k];
    });
    self.inputs[0]->accumulate(g);
  });
}

/// -log softmax(logits)[target] for a vector of logits (either orientation).
inline Tensor softmax_cross_entropy(const Tensor& logits, std::size_t target) {
  if (logits.rows() != 1 && logits.cols() != 1)
    throw ShapeError("softmax_cross_entropy: expected a vector, got " + shape_string(logits.shape()));
  const Array& z = logits.value();
  if (target >= z.size())
    throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(target) + " outside " +
                            std::to_string(z.size()) + " classes");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : z.data()) mx = std::max(mx, v);
  double total = 0.0;
  for (double v : z.data()) total += std::exp(v - mx);
  const double lse = mx + std::log(total);
  Array probs(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) probs[i] = std::exp(z[i] - lse);
  return detail::make_result(Array::scalar(lse - z[target]), "softmax_cross_entropy", {logits},
                             [probs, target](TapeNode& self) {
                               Array g = probs;
                               g[target] -= 1.0;
                               for (double& v : g.data()) v *= self.grad[0];
                               self.inputs[0]->accumulate(g);
                             });
}

// ---------------------------------------------------------------------------
// Selection

/// Indices of the k largest entries, ties broken toward the lower index,
/// returned in ascending index order. k larger than the row is clamped.
inline std::vector<std::size_t> topk_indices(std::span<const double> row, std::size_t k) {
  if (k == 0) throw std::invalid_argument("topk_indices: k must be at least 1");
  if (k > row.size()) {
    log_warning("topk_indices: k=" + std::to_string(k) + " exceeds row length " +
                std::to_string(row.size()) + "; clamping");
    k = row.size();
  }
  std::vector<std::size_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return row[a] > row[b] || (row[a] == row[b] && a < b);
                    });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace cag
