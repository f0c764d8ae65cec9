#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices of
// doubles. Every op builds a node holding its inputs and a backward closure;
// backward() collects the reachable nodes, orders them by creation id and
// replays them in reverse (define-by-run, one graph per forward pass).
//
// All matrix kernels compute each output row with a fixed summation order
// that does not depend on how many rows are processed together. Evaluating a
// prefix of a sequence, or one sequence inside a packed batch, therefore
// reproduces the same bits as the full computation.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "genemb/error.hpp"

namespace genemb::ad {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  bool consumed = false;  // set on a loss once backward has run
  std::string_view op = "leaf";
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

namespace detail {

inline std::uint64_t next_id() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    std::size_t n = 1;
    for (auto e : shape) {
      if (e == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape));
      n *= e;
    }
    if (n != data.size())
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(n) +
                       " values, got " + std::to_string(data.size()));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->id = detail::next_id();
    return Tensor(std::move(node));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(data), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false) {
    std::vector<double> d;
    std::size_t c = rows.size() ? rows.begin()->size() : 0;
    for (auto& r : rows) {
      if (r.size() != c) throw ShapeError("tensor: ragged initializer");
      d.insert(d.end(), r.begin(), r.end());
    }
    return matrix(rows.size(), c, std::move(d), requires_grad);
  }

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
    return matrix(rows, cols, std::vector<double>(rows * cols, 0.0), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return matrix(1, 1, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rows() const { return node_->rows(); }
  std::size_t cols() const { return node_->cols(); }
  std::size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  std::string_view op() const { return node_->op; }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
    return node_->data[0];
  }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  // Leaf copy sharing nothing with the graph.
  Tensor detach() const { return from(shape(), node_->data, false); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline void require_finite(std::string_view op, const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v))
      throw NumericError(std::string(op) + ": non-finite input value in tensor of shape " +
                         shape_str(t.shape()));
}

inline void require_matrix(std::string_view op, const Tensor& t) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined input tensor");
  if (t.shape().size() != 2)
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
  require_finite(op, t);
}

[[noreturn]] inline void mismatch(std::string_view op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

// Builds the result node; records inputs and the backward closure only when
// some input needs a gradient and recording is enabled.
inline Tensor make_result(std::string_view op, std::size_t rows, std::size_t cols,
                          std::vector<double> data, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = {rows, cols};
  node->data = std::move(data);
  node->op = op;
  node->id = next_id();
  bool needs = false;
  if (grad_mode())
    for (auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (auto& in : inputs) node->inputs.push_back(in.node());
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

// out[m x n] (+)= a[m x k] * b[k x n]
inline void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict out,
                    std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(out, out + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict o = out + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = ai[p];
      const double* __restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += s * bp[j];
    }
  }
}

// out[k x n] += a^T * g  where a is [m x k] and g is [m x n]
inline void gemm_tn_acc(const double* __restrict a, const double* __restrict g, double* __restrict out,
                        std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a[i * k + p];
      if (s == 0.0) continue;
      double* __restrict o = out + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += s * gi[j];
    }
  }
}

inline std::vector<double> transpose_copy(std::span<const double> a, std::size_t r, std::size_t c) {
  std::vector<double> t(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
  return t;
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void accumulate_into(Node& in, std::span<const double> g) {
  if (!in.requires_grad) return;
  auto& dst = in.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix("matmul", a);
  detail::require_matrix("matmul", b);
  if (a.cols() != b.rows()) detail::mismatch("matmul", a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  return detail::make_result("matmul", m, n, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    if (A.requires_grad) {
      auto bt = detail::transpose_copy(B.data, k, n);
      detail::gemm_nn(self.grad.data(), bt.data(), A.ensure_grad().data(), m, n, k, true);
    }
    if (B.requires_grad) detail::gemm_tn_acc(A.data.data(), self.grad.data(), B.ensure_grad().data(), m, k, n);
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_matrix("add", a);
  detail::require_matrix("add", b);
  if (a.shape() != b.shape()) detail::mismatch("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result("add", a.rows(), a.cols(), std::move(out), {a, b}, [](Node& self) {
    detail::accumulate_into(*self.inputs[0], self.grad);
    detail::accumulate_into(*self.inputs[1], self.grad);
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_matrix("mul", a);
  detail::require_matrix("mul", b);
  if (a.shape() != b.shape()) detail::mismatch("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result("mul", a.rows(), a.cols(), std::move(out), {a, b}, [](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    if (A.requires_grad) {
      auto& g = A.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B.data[i];
    }
    if (B.requires_grad) {
      auto& g = B.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A.data[i];
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix("transpose", a);
  const std::size_t r = a.rows(), c = a.cols();
  return detail::make_result("transpose", c, r, detail::transpose_copy(a.data(), r, c), {a},
                             [r, c](Node& self) {
                               auto g = detail::transpose_copy(self.grad, c, r);
                               detail::accumulate_into(*self.inputs[0], g);
                             });
}

inline Tensor scale(const Tensor& a, double s) {
  detail::require_matrix("scale", a);
  if (!std::isfinite(s)) throw NumericError("scale: non-finite factor");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return detail::make_result("scale", a.rows(), a.cols(), std::move(out), {a}, [s](Node& self) {
    Node& A = *self.inputs[0];
    auto& g = A.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  detail::require_matrix("add_scalar", a);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
  return detail::make_result("add_scalar", a.rows(), a.cols(), std::move(out), {a},
                             [](Node& self) { detail::accumulate_into(*self.inputs[0], self.grad); });
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

inline Tensor exp(const Tensor& a) {
  detail::require_matrix("exp", a);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
  return detail::make_result("exp", a.rows(), a.cols(), std::move(out), {a}, [](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.data[i];
  });
}

// Elementwise clamp to [lo, hi]; gradient passes only strictly inside.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  detail::require_matrix("clamp", a);
  if (!(lo <= hi)) throw ShapeError("clamp: empty interval");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(a.data()[i], lo, hi);
  return detail::make_result("clamp", a.rows(), a.cols(), std::move(out), {a}, [lo, hi](Node& self) {
    Node& A = *self.inputs[0];
    auto& g = A.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (A.data[i] > lo && A.data[i] < hi) g[i] += self.grad[i];
  });
}

// Elementwise minimum; on ties the gradient goes to the first argument.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  detail::require_matrix("minimum", a);
  detail::require_matrix("minimum", b);
  if (a.shape() != b.shape()) detail::mismatch("minimum", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.data()[i], b.data()[i]);
  return detail::make_result("minimum", a.rows(), a.cols(), std::move(out), {a, b}, [](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const bool first = A.data[i] <= B.data[i];
      Node& dst = first ? A : B;
      if (dst.requires_grad) dst.ensure_grad()[i] += self.grad[i];
    }
  });
}

inline Tensor sum(const Tensor& a) {
  detail::require_matrix("sum", a);
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result("sum", 1, 1, {s}, {a}, [](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (double& v : g) v += self.grad[0];
  });
}

inline Tensor embed_lookup(const Tensor& table, std::span<const int> ids) {
  detail::require_matrix("embed_lookup", table);
  if (ids.empty()) throw ShapeError("embed_lookup: empty id list");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw ShapeError("embed_lookup: id " + std::to_string(ids[i]) + " outside table of shape " +
                       shape_str(table.shape()));
    std::copy_n(table.data().data() + ids[i] * d, d, out.data() + i * d);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return detail::make_result("embed_lookup", ids.size(), d, std::move(out), {table},
                             [saved = std::move(saved), d](Node& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               for (std::size_t i = 0; i < saved.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j) g[saved[i] * d + j] += self.grad[i * d + j];
                             });
}

inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  detail::require_matrix("gather_rows", x);
  if (idx.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t d = x.cols();
  std::vector<double> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.rows())
      throw ShapeError("gather_rows: row " + std::to_string(idx[i]) + " outside shape " + shape_str(x.shape()));
    std::copy_n(x.data().data() + idx[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> saved(idx.begin(), idx.end());
  return detail::make_result("gather_rows", idx.size(), d, std::move(out), {x},
                             [saved = std::move(saved), d](Node& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               for (std::size_t i = 0; i < saved.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j) g[saved[i] * d + j] += self.grad[i * d + j];
                             });
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_matrix("slice_rows", x);
  if (begin >= end || end > x.rows())
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for shape " + shape_str(x.shape()));
  const std::size_t d = x.cols();
  std::vector<double> out(x.data().begin() + begin * d, x.data().begin() + end * d);
  return detail::make_result("slice_rows", end - begin, d, std::move(out), {x}, [begin, d](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * d + i] += self.grad[i];
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t d = parts[0].cols();
  std::size_t rows = 0;
  for (auto& p : parts) {
    detail::require_matrix("concat_rows", p);
    if (p.cols() != d) detail::mismatch("concat_rows", parts[0], p);
    rows += p.rows();
  }
  std::vector<double> out;
  out.reserve(rows * d);
  for (auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_result("concat_rows", rows, d, std::move(out), parts, [](Node& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      const std::size_t n = in->data.size();
      if (in->requires_grad) {
        auto& g = in->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

// Sets entries where mask is true to `value`; those entries receive no gradient.
inline Tensor mask_fill(const Tensor& x, const std::vector<bool>& mask, double value) {
  detail::require_matrix("mask_fill", x);
  if (mask.size() != x.numel())
    throw ShapeError("mask_fill: mask of " + std::to_string(mask.size()) + " entries for shape " +
                     shape_str(x.shape()));
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = value;
  return detail::make_result("mask_fill", x.rows(), x.cols(), std::move(out), {x}, [mask](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!mask[i]) g[i] += self.grad[i];
  });
}

inline Tensor softmax_rows(const Tensor& x) {
  detail::require_matrix("softmax_rows", x);
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.data().data() + i * c;
    double* yi = out.data() + i * c;
    const double m = *std::max_element(xi, xi + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (yi[j] = std::exp(xi[j] - m));
    for (std::size_t j = 0; j < c; ++j) yi[j] /= z;
  }
  return detail::make_result("softmax_rows", r, c, std::move(out), {x}, [r, c](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = self.data.data() + i * c;
      const double* dy = self.grad.data() + i * c;
      const double s = detail::dot(y, dy, c);
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[j] * (dy[j] - s);
    }
  });
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  detail::require_matrix("layer_norm", x);
  detail::require_matrix("layer_norm", gain);
  detail::require_matrix("layer_norm", bias);
  if (!(eps > 0.0)) throw ShapeError("layer_norm: epsilon must be positive");
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.rows() != 1 || gain.cols() != c) detail::mismatch("layer_norm", x, gain);
  if (bias.rows() != 1 || bias.cols() != c) detail::mismatch("layer_norm", x, bias);
  std::vector<double> out(r * c), xhat(r * c), inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.data().data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xi[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xi[j] - mean) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gain.data()[j] + bias.data()[j];
    }
  }
  return detail::make_result(
      "layer_norm", r, c, std::move(out), {x, gain, bias},
      [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Node& X = *self.inputs[0];
        Node& G = *self.inputs[1];
        Node& B = *self.inputs[2];
        const double* dy = self.grad.data();
        if (G.requires_grad) {
          auto& gg = G.ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gg[j] += dy[i * c + j] * xhat[i * c + j];
        }
        if (B.requires_grad) {
          auto& gb = B.ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[j] += dy[i * c + j];
        }
        if (X.requires_grad) {
          auto& gx = X.ensure_grad();
          std::vector<double> dxhat(c);
          for (std::size_t i = 0; i < r; ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              dxhat[j] = dy[i * c + j] * G.data[j];
              m1 += dxhat[j];
              m2 += dxhat[j] * xhat[i * c + j];
            }
            m1 /= static_cast<double>(c);
            m2 /= static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j)
              gx[i * c + j] += inv_std[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2);
          }
        }
      });
}

// Exact GELU, x * Phi(x).
inline Tensor gelu(const Tensor& x) {
  detail::require_matrix("gelu", x);
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  return detail::make_result("gelu", x.rows(), x.cols(), std::move(out), {x}, [](Node& self) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    Node& X = *self.inputs[0];
    auto& g = X.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = X.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

// Per-row cross entropy -log softmax(row)[target], returned as an [rows x 1]
// column. Target -1 marks an ignored row (zero loss, zero gradient).
inline Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets) {
  detail::require_matrix("cross_entropy_rows", logits);
  const std::size_t r = logits.rows(), c = logits.cols();
  if (targets.size() != r)
    throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  std::vector<double> out(r, 0.0), probs(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    const int t = targets[i];
    if (t < 0) continue;
    if (static_cast<std::size_t>(t) >= c)
      throw ShapeError("cross_entropy_rows: target " + std::to_string(t) + " outside " + std::to_string(c) +
                       " classes");
    const double* xi = logits.data().data() + i * c;
    const std::size_t am = static_cast<std::size_t>(std::max_element(xi, xi + c) - xi);
    const double m = xi[am];
    double rest = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(xi[j] - m);
      probs[i * c + j] = e;
      if (j != am) rest += e;
    }
    const double z = 1.0 + rest;
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    // log1p keeps tiny losses (target is the clear maximum) representable.
    out[i] = (m - xi[t]) + std::log1p(rest);
  }
  std::vector<int> saved(targets.begin(), targets.end());
  return detail::make_result("cross_entropy_rows", r, 1, std::move(out), {logits},
                             [r, c, saved = std::move(saved), probs = std::move(probs)](Node& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               for (std::size_t i = 0; i < r; ++i) {
                                 if (saved[i] < 0) continue;
                                 const double gi = self.grad[i];
                                 for (std::size_t j = 0; j < c; ++j) g[i * c + j] += gi * probs[i * c + j];
                                 g[i * c + saved[i]] -= gi;
                               }
                             });
}

inline constexpr double kNormFloor = 1e-9;

inline Tensor l2_normalize_rows(const Tensor& x) {
  detail::require_matrix("l2_normalize_rows", x);
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(r * c), norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.data().data() + i * c;
    norms[i] = std::max(std::sqrt(detail::dot(xi, xi, c)), kNormFloor);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xi[j] / norms[i];
  }
  return detail::make_result("l2_normalize_rows", r, c, std::move(out), {x},
                             [r, c, norms = std::move(norms)](Node& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               for (std::size_t i = 0; i < r; ++i) {
                                 const double* y = self.data.data() + i * c;
                                 const double* dy = self.grad.data() + i * c;
                                 const bool floored = norms[i] <= kNormFloor;
                                 const double s = floored ? 0.0 : detail::dot(y, dy, c);
                                 for (std::size_t j = 0; j < c; ++j)
                                   g[i * c + j] += (dy[j] - y[j] * s) / norms[i];
                               }
                             });
}

// All-pairs row dot products: out[i][j] = a_i . b_j  (a: m x d, b: n x d).
inline Tensor dot_rows(const Tensor& a, const Tensor& b) {
  detail::require_matrix("dot_rows", a);
  detail::require_matrix("dot_rows", b);
  if (a.cols() != b.cols()) detail::mismatch("dot_rows", a, b);
  const std::size_t m = a.rows(), n = b.rows(), d = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = detail::dot(a.data().data() + i * d, b.data().data() + j * d, d);
  return detail::make_result("dot_rows", m, n, std::move(out), {a, b}, [m, n, d](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    if (A.requires_grad) detail::gemm_nn(self.grad.data(), B.data.data(), A.ensure_grad().data(), m, n, d, true);
    if (B.requires_grad) detail::gemm_tn_acc(self.grad.data(), A.data.data(), B.ensure_grad().data(), m, n, d);
  });
}

// Multi-head causal self-attention over packed sequences. q, k, v are
// [T x d] with T = sum(segments); each segment attends only within itself
// and only to earlier-or-equal positions. Head h uses columns
// [h*d/heads, (h+1)*d/heads).
inline Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                               std::span<const std::size_t> segments) {
  detail::require_matrix("causal_attention", q);
  detail::require_matrix("causal_attention", k);
  detail::require_matrix("causal_attention", v);
  if (q.shape() != k.shape()) detail::mismatch("causal_attention", q, k);
  if (q.shape() != v.shape()) detail::mismatch("causal_attention", q, v);
  const std::size_t T = q.rows(), d = q.cols();
  if (heads == 0 || d % heads != 0)
    throw ShapeError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  std::size_t total = 0;
  for (auto s : segments) {
    if (s == 0) throw ShapeError("causal_attention: empty segment");
    total += s;
  }
  if (total != T)
    throw ShapeError("causal_attention: segments cover " + std::to_string(total) + " rows, tensor has " +
                     std::to_string(T));
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[head][row] holds the row's attention weights over positions
  // 0..row of its segment, laid out contiguously.
  std::vector<std::size_t> seg_start(T), prob_off(T + 1, 0);
  {
    std::size_t off = 0;
    for (auto s : segments) {
      for (std::size_t i = 0; i < s; ++i) seg_start[off + i] = off;
      off += s;
    }
    for (std::size_t t = 0; t < T; ++t) prob_off[t + 1] = prob_off[t] + (t - seg_start[t] + 1);
  }
  const std::size_t per_head = prob_off[T];
  std::vector<double> probs(per_head * heads);
  std::vector<double> out(T * d, 0.0);
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t s0 = seg_start[t];
      double* p = probs.data() + h * per_head + prob_off[t];
      const std::size_t len = t - s0 + 1;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < len; ++j) {
        p[j] = sc * detail::dot(Q + t * d + c0, K + (s0 + j) * d + c0, dh);
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) z += (p[j] = std::exp(p[j] - mx));
      for (std::size_t j = 0; j < len; ++j) p[j] /= z;
      double* o = out.data() + t * d + c0;
      for (std::size_t j = 0; j < len; ++j) {
        const double w = p[j];
        const double* vj = V + (s0 + j) * d + c0;
        for (std::size_t e = 0; e < dh; ++e) o[e] += w * vj[e];
      }
    }
  }
  return detail::make_result(
      "causal_attention", T, d, std::move(out), {q, k, v},
      [T, d, heads, dh, sc, per_head, seg_start = std::move(seg_start), prob_off = std::move(prob_off),
       probs = std::move(probs)](Node& self) {
        Node& Qn = *self.inputs[0];
        Node& Kn = *self.inputs[1];
        Node& Vn = *self.inputs[2];
        std::vector<double> dq(T * d, 0.0), dk(T * d, 0.0), dv(T * d, 0.0);
        std::vector<double> ds;
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t c0 = h * dh;
          for (std::size_t t = 0; t < T; ++t) {
            const std::size_t s0 = seg_start[t];
            const std::size_t len = t - s0 + 1;
            const double* p = probs.data() + h * per_head + prob_off[t];
            const double* dout = self.grad.data() + t * d + c0;
            ds.assign(len, 0.0);
            double acc = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
              ds[j] = detail::dot(dout, Vn.data.data() + (s0 + j) * d + c0, dh);
              acc += p[j] * ds[j];
              double* dvj = dv.data() + (s0 + j) * d + c0;
              for (std::size_t e = 0; e < dh; ++e) dvj[e] += p[j] * dout[e];
            }
            double* dqt = dq.data() + t * d + c0;
            const double* qt = Qn.data.data() + t * d + c0;
            for (std::size_t j = 0; j < len; ++j) {
              const double g = p[j] * (ds[j] - acc) * sc;
              const double* kj = Kn.data.data() + (s0 + j) * d + c0;
              double* dkj = dk.data() + (s0 + j) * d + c0;
              for (std::size_t e = 0; e < dh; ++e) {
                dqt[e] += g * kj[e];
                dkj[e] += g * qt[e];
              }
            }
          }
        }
        detail::accumulate_into(Qn, dq);
        detail::accumulate_into(Kn, dk);
        detail::accumulate_into(Vn, dv);
      });
}

// ---------------------------------------------------------------------------
// Backward

// Nodes reachable from a loss, in creation order.
struct Tape {
  std::vector<Node*> nodes;

  static Tape collect(Node& root) {
    Tape tape;
    std::vector<Node*> stack{&root};
    std::unordered_set<Node*> seen{&root};
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      if (n->backward_fn) tape.nodes.push_back(n);
      for (auto& in : n->inputs)
        if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
    std::sort(tape.nodes.begin(), tape.nodes.end(), [](Node* a, Node* b) { return a->id < b->id; });
    return tape;
  }
};

// Accumulates d(loss)/d(leaf) into every reachable leaf with requires_grad.
// The graph is released afterwards; a second call on the same loss throws.
inline void backward(const Tensor& loss) {
  if (!loss.defined()) throw ShapeError("backward: undefined loss");
  Node& root = *loss.node();
  if (root.data.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(root.shape));
  if (root.consumed) throw Error("backward: graph already consumed by an earlier backward call");
  if (!root.requires_grad) throw Error("backward: loss does not depend on any tensor requiring grad");
  if (!root.backward_fn) {  // the loss is itself a leaf
    root.ensure_grad()[0] += 1.0;
    root.consumed = true;
    return;
  }
  Tape tape = Tape::collect(root);
  root.ensure_grad()[0] += 1.0;
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
    Node& n = **it;
    if (n.grad.empty()) continue;
    for (double g : n.grad)
      if (!std::isfinite(g))
        throw NumericError("backward: non-finite gradient flowing out of op '" + std::string(n.op) + "'");
    n.backward_fn(n);
  }
  for (Node* n : tape.nodes) {
    n->backward_fn = nullptr;
    n->inputs.clear();
    if (n != &root) n->grad.clear();
  }
  root.consumed = true;
}

}  // namespace genemb::ad
