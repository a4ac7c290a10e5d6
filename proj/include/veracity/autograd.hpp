#pragma once
// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Graph records operations in execution order; backward()
// replays them in reverse. Parameters are leaf tensors that outlive graphs
// and accumulate gradients across backward passes until zeroed.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "veracity/common.hpp"

namespace veracity::ad {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const noexcept { return rows * cols; }
  bool operator==(const Shape&) const = default;
  std::string str() const { return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")"; }
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first touched
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Handle to a node. Copies share storage.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  /// Leaf tensor.
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (values.size() != shape.size())
      throw ShapeError("tensor values " + std::to_string(values.size()) + " != shape " + shape.str());
    node_->shape = shape;
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(shape, std::vector<T>(shape.size(), T(0)), requires_grad);
  }
  static Tensor row(std::vector<T> values, bool requires_grad = false) {
    const auto n = values.size();
    return Tensor(Shape{1, n}, std::move(values), requires_grad);
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rows() const { return node_->shape.rows; }
  std::size_t cols() const { return node_->shape.cols; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<T> value() { return node_->value; }
  std::span<const T> value() const { return node_->value; }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  T& at(std::size_t r, std::size_t c) { return node_->value[r * cols() + c]; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  T item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape().str());
    return node_->value[0];
  }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient; zeros if never touched.
  std::vector<T> grad() const {
    return node_->grad.empty() ? std::vector<T>(size(), T(0)) : node_->grad;
  }
  std::vector<T>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Records differentiable operations. Confined to one thread.
template <typename T>
class Graph {
 public:
  explicit Graph(bool training = false, std::uint64_t seed = 0, bool checked = false)
      : training_(training), checked_(checked), rng_(seed) {}

  bool training() const noexcept { return training_; }
  void set_training(bool t) noexcept { training_ = t; }
  bool checked() const noexcept { return checked_; }
  void set_checked(bool c) noexcept { checked_ = c; }
  Rng& rng() noexcept { return rng_; }
  std::size_t recorded_ops() const noexcept { return tape_.size(); }

  Tensor<T> record(Shape shape, std::vector<T> value,
                   std::initializer_list<Tensor<T>> parents,
                   std::function<void(Node<T>&)> backward, const char* op) {
    return record(shape, std::move(value), std::vector<Tensor<T>>(parents), std::move(backward), op);
  }

  Tensor<T> record(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& parents,
                   std::function<void(Node<T>&)> backward, const char* op) {
    if (checked_) {
      for (const auto& v : value)
        if (!std::isfinite(static_cast<double>(v)))
          throw NumericError(std::string("non-finite value produced by ") + op);
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = shape;
    node->value = std::move(value);
    for (const auto& p : parents) {
      if (p.requires_grad()) node->requires_grad = true;
    }
    if (node->requires_grad) {
      for (const auto& p : parents) node->parents.push_back(p.node_ptr());
      node->backward = std::move(backward);
      tape_.push_back(node);
    }
    return Tensor<T>(std::move(node));
  }

  /// Populates gradients of every tensor upstream of `loss` that requires
  /// them. Parameter gradients accumulate.
  void backward(const Tensor<T>& loss) {
    if (loss.size() != 1) throw ShapeError("backward() needs a scalar loss, got " + loss.shape().str());
    if (!loss.requires_grad()) return;
    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.grad.empty()) continue;
      n.backward(n);
    }
    if (checked_) {
      for (const auto& n : tape_)
        for (const auto& p : n->parents)
          for (const auto& g : p->grad)
            if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient");
    }
  }

  void clear() { tape_.clear(); }

 private:
  bool training_;
  bool checked_;
  Rng rng_;
  std::vector<std::shared_ptr<Node<T>>> tape_;
};

namespace detail {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMajor<T>>;
template <typename T>
using Map = Eigen::Map<RowMajor<T>>;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
MapC<T> cmap(const std::vector<T>& v, Shape s) {
  return MapC<T>(v.data(), static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
}
template <typename T>
Map<T> mmap(std::vector<T>& v, Shape s) {
  return Map<T>(v.data(), static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
}

template <typename T, typename F, typename D>
Tensor<T> unary(Graph<T>& g, const Tensor<T>& a, F f, D dfdy_x, const char* op) {
  std::vector<T> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  Node<T>* pa = a.node();
  return g.record(a.shape(), std::move(out), {a},
                  [pa, dfdy_x](Node<T>& self) {
                    if (!pa->requires_grad) return;
                    auto& ga = pa->grad_buffer();
                    for (std::size_t i = 0; i < ga.size(); ++i)
                      ga[i] += self.grad[i] * dfdy_x(self.value[i], pa->value[i]);
                  },
                  op);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// (m x k) * (k x n)
template <typename T>
Tensor<T> matmul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.cols() == b.rows(), "matmul shape mismatch " + a.shape().str() + " * " + b.shape().str());
  const Shape s{a.rows(), b.cols()};
  std::vector<T> out(s.size());
  detail::mmap(out, s).noalias() = detail::cmap(a.values(), a.shape()) * detail::cmap(b.values(), b.shape());
  Node<T>*pa = a.node(), *pb = b.node();
  return g.record(s, std::move(out), {a, b},
                  [pa, pb](Node<T>& self) {
                    auto dc = detail::cmap(self.grad, self.shape);
                    if (pa->requires_grad)
                      detail::mmap(pa->grad_buffer(), pa->shape).noalias() +=
                          dc * detail::cmap(pb->value, pb->shape).transpose();
                    if (pb->requires_grad)
                      detail::mmap(pb->grad_buffer(), pb->shape).noalias() +=
                          detail::cmap(pa->value, pa->shape).transpose() * dc;
                  },
                  "matmul");
}

/// (m x k) * (n x k)^T
template <typename T>
Tensor<T> matmul_nt(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.cols() == b.cols(), "matmul_nt shape mismatch " + a.shape().str() + " * " + b.shape().str() + "^T");
  const Shape s{a.rows(), b.rows()};
  std::vector<T> out(s.size());
  detail::mmap(out, s).noalias() =
      detail::cmap(a.values(), a.shape()) * detail::cmap(b.values(), b.shape()).transpose();
  Node<T>*pa = a.node(), *pb = b.node();
  return g.record(s, std::move(out), {a, b},
                  [pa, pb](Node<T>& self) {
                    auto dc = detail::cmap(self.grad, self.shape);
                    if (pa->requires_grad)
                      detail::mmap(pa->grad_buffer(), pa->shape).noalias() +=
                          dc * detail::cmap(pb->value, pb->shape);
                    if (pb->requires_grad)
                      detail::mmap(pb->grad_buffer(), pb->shape).noalias() +=
                          dc.transpose() * detail::cmap(pa->value, pa->shape);
                  },
                  "matmul_nt");
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "add shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  std::vector<T> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
  Node<T>*pa = a.node(), *pb = b.node();
  return g.record(a.shape(), std::move(out), {a, b},
                  [pa, pb](Node<T>& self) {
                    for (Node<T>* p : {pa, pb}) {
                      if (!p->requires_grad) continue;
                      auto& gp = p->grad_buffer();
                      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
                    }
                  },
                  "add");
}

template <typename T>
Tensor<T> sub(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "sub shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  std::vector<T> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.values()[i];
  Node<T>*pa = a.node(), *pb = b.node();
  return g.record(a.shape(), std::move(out), {a, b},
                  [pa, pb](Node<T>& self) {
                    if (pa->requires_grad) {
                      auto& ga = pa->grad_buffer();
                      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                    }
                    if (pb->requires_grad) {
                      auto& gb = pb->grad_buffer();
                      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
                    }
                  },
                  "sub");
}

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "mul shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  std::vector<T> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.values()[i];
  Node<T>*pa = a.node(), *pb = b.node();
  return g.record(a.shape(), std::move(out), {a, b},
                  [pa, pb](Node<T>& self) {
                    if (pa->requires_grad) {
                      auto& ga = pa->grad_buffer();
                      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * pb->value[i];
                    }
                    if (pb->requires_grad) {
                      auto& gb = pb->grad_buffer();
                      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * pa->value[i];
                    }
                  },
                  "mul");
}

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& a, T s) {
  return detail::unary(
      g, a, [s](T x) { return x * s; }, [s](T, T) { return s; }, "scale");
}

/// a (m x n) + bias (1 x n), broadcast over rows.
template <typename T>
Tensor<T> add_row(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& bias) {
  detail::require(bias.rows() == 1 && bias.cols() == a.cols(),
                  "add_row bias " + bias.shape().str() + " vs " + a.shape().str());
  std::vector<T> out(a.values());
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.values()[i % n];
  Node<T>*pa = a.node(), *pb = bias.node();
  return g.record(a.shape(), std::move(out), {a, bias},
                  [pa, pb, n](Node<T>& self) {
                    if (pa->requires_grad) {
                      auto& ga = pa->grad_buffer();
                      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                    }
                    if (pb->requires_grad) {
                      auto& gb = pb->grad_buffer();
                      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % n] += self.grad[i];
                    }
                  },
                  "add_row");
}

/// a (m x n) scaled per row by w (m x 1).
template <typename T>
Tensor<T> mul_col(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& w) {
  detail::require(w.cols() == 1 && w.rows() == a.rows(),
                  "mul_col weights " + w.shape().str() + " vs " + a.shape().str());
  const std::size_t n = a.cols();
  std::vector<T> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= w.values()[i / n];
  Node<T>*pa = a.node(), *pw = w.node();
  return g.record(a.shape(), std::move(out), {a, w},
                  [pa, pw, n](Node<T>& self) {
                    if (pa->requires_grad) {
                      auto& ga = pa->grad_buffer();
                      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * pw->value[i / n];
                    }
                    if (pw->requires_grad) {
                      auto& gw = pw->grad_buffer();
                      for (std::size_t i = 0; i < self.grad.size(); ++i)
                        gw[i / n] += self.grad[i] * pa->value[i];
                    }
                  },
                  "mul_col");
}

/// mask * fresh + (1 - mask) * held, with a constant 0/1 row mask (m entries).
/// Used to carry recurrent state across padded time steps.
template <typename T>
Tensor<T> blend(Graph<T>& g, const std::vector<std::uint8_t>& row_mask, const Tensor<T>& fresh,
                const Tensor<T>& held) {
  detail::require(fresh.shape() == held.shape() && row_mask.size() == fresh.rows(), "blend shape mismatch");
  const std::size_t n = fresh.cols();
  std::vector<T> out(fresh.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = row_mask[i / n] ? fresh.values()[i] : held.values()[i];
  Node<T>*pf = fresh.node(), *ph = held.node();
  return g.record(fresh.shape(), std::move(out), {fresh, held},
                  [pf, ph, row_mask, n](Node<T>& self) {
                    if (pf->requires_grad) {
                      auto& gf = pf->grad_buffer();
                      for (std::size_t i = 0; i < gf.size(); ++i)
                        if (row_mask[i / n]) gf[i] += self.grad[i];
                    }
                    if (ph->requires_grad) {
                      auto& gh = ph->grad_buffer();
                      for (std::size_t i = 0; i < gh.size(); ++i)
                        if (!row_mask[i / n]) gh[i] += self.grad[i];
                    }
                  },
                  "blend");
}

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& a) {
  return detail::unary(
      g, a, [](T x) { return x > T(0) ? x : T(0); }, [](T, T x) { return x > T(0) ? T(1) : T(0); },
      "relu");
}

template <typename T>
Tensor<T> sigmoid(Graph<T>& g, const Tensor<T>& a) {
  return detail::unary(
      g, a,
      [](T x) {
        return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
      },
      [](T y, T) { return y * (T(1) - y); }, "sigmoid");
}

template <typename T>
Tensor<T> tanh(Graph<T>& g, const Tensor<T>& a) {
  return detail::unary(
      g, a, [](T x) { return std::tanh(x); }, [](T y, T) { return T(1) - y * y; }, "tanh");
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_cols(Graph<T>& g, const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols of nothing");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require(p.rows() == m, "concat_cols row mismatch");
    n += p.cols();
  }
  std::vector<T> out(m * n);
  std::vector<Node<T>*> nodes;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t r = 0; r < m; ++r)
      std::copy_n(p.values().data() + r * c, c, out.data() + r * n + off);
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += c;
  }
  return g.record(Shape{m, n}, std::move(out), parts,
                  [nodes, offsets, m, n](Node<T>& self) {
                    for (std::size_t k = 0; k < nodes.size(); ++k) {
                      Node<T>* p = nodes[k];
                      if (!p->requires_grad) continue;
                      auto& gp = p->grad_buffer();
                      const std::size_t c = p->shape.cols;
                      for (std::size_t r = 0; r < m; ++r)
                        for (std::size_t j = 0; j < c; ++j) gp[r * c + j] += self.grad[r * n + offsets[k] + j];
                    }
                  },
                  "concat_cols");
}

template <typename T>
Tensor<T> concat_rows(Graph<T>& g, const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows of nothing");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require(p.cols() == n, "concat_rows column mismatch");
    m += p.rows();
  }
  std::vector<T> out;
  out.reserve(m * n);
  std::vector<Node<T>*> nodes;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    nodes.push_back(p.node());
  }
  return g.record(Shape{m, n}, std::move(out), parts,
                  [nodes](Node<T>& self) {
                    std::size_t off = 0;
                    for (Node<T>* p : nodes) {
                      if (p->requires_grad) {
                        auto& gp = p->grad_buffer();
                        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[off + i];
                      }
                      off += p->value.size();
                    }
                  },
                  "concat_rows");
}

template <typename T>
Tensor<T> slice_cols(Graph<T>& g, const Tensor<T>& a, std::size_t begin, std::size_t count) {
  detail::require(begin + count <= a.cols(), "slice_cols out of range");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * count);
  for (std::size_t r = 0; r < m; ++r)
    std::copy_n(a.values().data() + r * n + begin, count, out.data() + r * count);
  Node<T>* pa = a.node();
  return g.record(Shape{m, count}, std::move(out), {a},
                  [pa, begin, count, m, n](Node<T>& self) {
                    auto& ga = pa->grad_buffer();
                    for (std::size_t r = 0; r < m; ++r)
                      for (std::size_t j = 0; j < count; ++j) ga[r * n + begin + j] += self.grad[r * count + j];
                  },
                  "slice_cols");
}

/// Rows by index (repeats allowed); backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(Graph<T>& g, const Tensor<T>& a, std::vector<std::size_t> rows) {
  const std::size_t n = a.cols();
  std::vector<T> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::require(rows[i] < a.rows(), "gather_rows index out of range");
    std::copy_n(a.values().data() + rows[i] * n, n, out.data() + i * n);
  }
  Node<T>* pa = a.node();
  const Shape shape{rows.size(), n};  // before rows is moved into the closure
  return g.record(shape, std::move(out), {a},
                  [pa, rows = std::move(rows), n](Node<T>& self) {
                    auto& ga = pa->grad_buffer();
                    for (std::size_t i = 0; i < rows.size(); ++i)
                      for (std::size_t j = 0; j < n; ++j) ga[rows[i] * n + j] += self.grad[i * n + j];
                  },
                  "gather_rows");
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class Axis { kRows, kCols };

/// Mean over rows (-> 1 x n) or over columns (-> m x 1).
template <typename T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& a, Axis axis) {
  const std::size_t m = a.rows(), n = a.cols();
  detail::require(m > 0 && n > 0, "mean of empty tensor");
  const bool over_rows = axis == Axis::kRows;
  const Shape s = over_rows ? Shape{1, n} : Shape{m, 1};
  std::vector<T> out(s.size(), T(0));
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[over_rows ? c : r] += a.values()[r * n + c];
  const T denom = T(over_rows ? m : n);
  for (auto& v : out) v /= denom;
  Node<T>* pa = a.node();
  return g.record(s, std::move(out), {a},
                  [pa, m, n, over_rows, denom](Node<T>& self) {
                    auto& ga = pa->grad_buffer();
                    for (std::size_t r = 0; r < m; ++r)
                      for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += self.grad[over_rows ? c : r] / denom;
                  },
                  "mean");
}

/// Row ranges [begin, end) reduced to one row each, by sum or mean.
/// Empty ranges yield a zero row.
struct Segment {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
};

template <typename T>
Tensor<T> segment_reduce(Graph<T>& g, const Tensor<T>& a, std::vector<Segment> segments, bool average) {
  const std::size_t n = a.cols();
  std::vector<T> out(segments.size() * n, T(0));
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto seg = segments[s];
    detail::require(seg.begin <= seg.end && seg.end <= a.rows(), "segment out of range");
    for (std::size_t r = seg.begin; r < seg.end; ++r)
      for (std::size_t c = 0; c < n; ++c) out[s * n + c] += a.values()[r * n + c];
    if (average && seg.size() > 0)
      for (std::size_t c = 0; c < n; ++c) out[s * n + c] /= T(seg.size());
  }
  Node<T>* pa = a.node();
  const Shape shape{segments.size(), n};
  return g.record(shape, std::move(out), {a},
                  [pa, segments = std::move(segments), n, average](Node<T>& self) {
                    auto& ga = pa->grad_buffer();
                    for (std::size_t s = 0; s < segments.size(); ++s) {
                      const auto seg = segments[s];
                      if (seg.size() == 0) continue;
                      const T k = average ? T(1) / T(seg.size()) : T(1);
                      for (std::size_t r = seg.begin; r < seg.end; ++r)
                        for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += self.grad[s * n + c] * k;
                    }
                  },
                  average ? "segment_mean" : "segment_sum");
}

template <typename T>
Tensor<T> segment_sum(Graph<T>& g, const Tensor<T>& a, std::vector<Segment> segments) {
  return segment_reduce(g, a, std::move(segments), false);
}

template <typename T>
Tensor<T> segment_mean(Graph<T>& g, const Tensor<T>& a, std::vector<Segment> segments) {
  return segment_reduce(g, a, std::move(segments), true);
}

/// Per-segment column-wise max (-> one row per segment). Empty segments give
/// zeros. Ties route the gradient to the first maximum.
template <typename T>
Tensor<T> segment_max(Graph<T>& g, const Tensor<T>& a, std::vector<Segment> segments) {
  const std::size_t n = a.cols();
  std::vector<T> out(segments.size() * n, T(0));
  std::vector<std::size_t> argmax(segments.size() * n, SIZE_MAX);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto seg = segments[s];
    detail::require(seg.begin <= seg.end && seg.end <= a.rows(), "segment out of range");
    for (std::size_t c = 0; c < n; ++c) {
      for (std::size_t r = seg.begin; r < seg.end; ++r) {
        const T v = a.values()[r * n + c];
        if (argmax[s * n + c] == SIZE_MAX || v > out[s * n + c]) {
          out[s * n + c] = v;
          argmax[s * n + c] = r;
        }
      }
    }
  }
  Node<T>* pa = a.node();
  return g.record(Shape{segments.size(), n}, std::move(out), {a},
                  [pa, argmax = std::move(argmax), n](Node<T>& self) {
                    auto& ga = pa->grad_buffer();
                    for (std::size_t i = 0; i < argmax.size(); ++i)
                      if (argmax[i] != SIZE_MAX) ga[argmax[i] * n + i % n] += self.grad[i];
                  },
                  "segment_max");
}

template <typename T>
Tensor<T> sum_all(Graph<T>& g, const Tensor<T>& a) {
  T total = T(0);
  for (auto v : a.values()) total += v;
  Node<T>* pa = a.node();
  return g.record(Shape{1, 1}, {total}, {a},
                  [pa](Node<T>& self) {
                    auto& ga = pa->grad_buffer();
                    for (auto& v : ga) v += self.grad[0];
                  },
                  "sum_all");
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> softmax_impl(Graph<T>& g, const Tensor<T>& logits, const std::vector<std::uint8_t>* mask,
                       const char* op) {
  const std::size_t m = logits.rows(), n = logits.cols();
  if (mask) require(mask->size() == m * n, "masked_softmax mask size mismatch");
  std::vector<T> out(m * n, T(0));
  for (std::size_t r = 0; r < m; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < n; ++c) {
      if (mask && !(*mask)[r * n + c]) continue;
      mx = std::max(mx, logits.values()[r * n + c]);
      any = true;
    }
    if (!any) throw Error("masked_softmax: row " + std::to_string(r) + " has no valid entries");
    T z = T(0);
    for (std::size_t c = 0; c < n; ++c) {
      if (mask && !(*mask)[r * n + c]) continue;
      out[r * n + c] = std::exp(logits.values()[r * n + c] - mx);
      z += out[r * n + c];
    }
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= z;
  }
  Node<T>* pa = logits.node();
  return g.record(logits.shape(), std::move(out), {logits},
                  [pa, m, n](Node<T>& self) {
                    auto& ga = pa->grad_buffer();
                    for (std::size_t r = 0; r < m; ++r) {
                      T dot = T(0);
                      for (std::size_t c = 0; c < n; ++c) dot += self.value[r * n + c] * self.grad[r * n + c];
                      for (std::size_t c = 0; c < n; ++c)
                        ga[r * n + c] += self.value[r * n + c] * (self.grad[r * n + c] - dot);
                    }
                  },
                  op);
}

}  // namespace detail

/// Row-wise softmax over the last axis.
template <typename T>
Tensor<T> softmax(Graph<T>& g, const Tensor<T>& logits) {
  return detail::softmax_impl(g, logits, nullptr, "softmax");
}

/// Row-wise softmax restricted to entries with mask 1. Masked entries are
/// exactly zero and receive exactly zero gradient.
template <typename T>
Tensor<T> masked_softmax(Graph<T>& g, const Tensor<T>& logits, const std::vector<std::uint8_t>& mask) {
  return detail::softmax_impl(g, logits, &mask, "masked_softmax");
}

/// Mean negative log-likelihood of target columns under row distributions p.
template <typename T>
Tensor<T> cross_entropy(Graph<T>& g, const Tensor<T>& p, const std::vector<std::size_t>& targets) {
  detail::require(targets.size() == p.rows(), "cross_entropy target count mismatch");
  const std::size_t n = p.cols();
  T loss = T(0);
  for (std::size_t r = 0; r < targets.size(); ++r) {
    detail::require(targets[r] < n, "cross_entropy target out of range");
    loss -= std::log(p.values()[r * n + targets[r]]);
  }
  const T m = T(targets.size());
  loss /= m;
  Node<T>* pp = p.node();
  return g.record(Shape{1, 1}, {loss}, {p},
                  [pp, targets, n, m](Node<T>& self) {
                    auto& gp = pp->grad_buffer();
                    for (std::size_t r = 0; r < targets.size(); ++r)
                      gp[r * n + targets[r]] -= self.grad[0] / (m * pp->value[r * n + targets[r]]);
                  },
                  "cross_entropy");
}

/// cross_entropy(masked_softmax(logits, mask), targets) computed in log space,
/// so an underflowed probability cannot turn the loss infinite.
template <typename T>
Tensor<T> masked_softmax_cross_entropy(Graph<T>& g, const Tensor<T>& logits, const std::vector<std::uint8_t>& mask,
                                       const std::vector<std::size_t>& targets) {
  const std::size_t m = logits.rows(), n = logits.cols();
  detail::require(mask.size() == m * n, "masked_softmax_cross_entropy mask size mismatch");
  detail::require(targets.size() == m, "masked_softmax_cross_entropy target count mismatch");
  std::vector<T> probs(m * n, T(0));
  double loss = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    detail::require(targets[r] < n && mask[r * n + targets[r]], "target outside the row's mask");
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < n; ++c)
      if (mask[r * n + c]) mx = std::max(mx, logits.values()[r * n + c]);
    T z = T(0);
    for (std::size_t c = 0; c < n; ++c) {
      if (!mask[r * n + c]) continue;
      probs[r * n + c] = std::exp(logits.values()[r * n + c] - mx);
      z += probs[r * n + c];
    }
    for (std::size_t c = 0; c < n; ++c) probs[r * n + c] /= z;
    loss += static_cast<double>(std::log(z) + mx - logits.values()[r * n + targets[r]]);
  }
  const T count = T(m);
  Node<T>* pa = logits.node();
  return g.record(Shape{1, 1}, {static_cast<T>(loss / static_cast<double>(m))}, {logits},
                  [pa, probs = std::move(probs), targets, n, count](Node<T>& self) {
                    auto& ga = pa->grad_buffer();
                    const T scale = self.grad[0] / count;
                    for (std::size_t r = 0; r < targets.size(); ++r) {
                      for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += scale * probs[r * n + c];
                      ga[r * n + targets[r]] -= scale;
                    }
                  },
                  "masked_softmax_cross_entropy");
}

// ---------------------------------------------------------------------------
// Embeddings, dropout, convolution helpers
// ---------------------------------------------------------------------------

/// Rows of `table` for each id.
template <typename T>
Tensor<T> embedding_lookup(Graph<T>& g, const Tensor<T>& table, const std::vector<std::int32_t>& ids) {
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows())
      throw ShapeError("embedding id " + std::to_string(ids[i]) + " out of range");
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  return gather_rows(g, table, std::move(rows));
}

/// Inverted dropout: identity outside training or when p == 0.
template <typename T>
Tensor<T> dropout(Graph<T>& g, const Tensor<T>& a, double p) {
  if (!g.training() || p <= 0.0) return a;
  if (p >= 1.0) throw Error("dropout rate must be < 1");
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> mask(a.size());
  for (auto& m : mask) m = g.rng().bernoulli(p) ? T(0) : keep_scale;
  std::vector<T> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  Node<T>* pa = a.node();
  return g.record(a.shape(), std::move(out), {a},
                  [pa, mask = std::move(mask)](Node<T>& self) {
                    auto& ga = pa->grad_buffer();
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * mask[i];
                  },
                  "dropout");
}

/// Every length-`width` window along each row: (m x n) -> (m*(n-width+1) x width).
template <typename T>
Tensor<T> unfold_cols(Graph<T>& g, const Tensor<T>& a, std::size_t width) {
  const std::size_t m = a.rows(), n = a.cols();
  detail::require(width >= 1 && width <= n, "unfold_cols width " + std::to_string(width) + " exceeds " + std::to_string(n));
  const std::size_t per_row = n - width + 1;
  std::vector<T> out(m * per_row * width);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t s = 0; s < per_row; ++s)
      std::copy_n(a.values().data() + r * n + s, width, out.data() + (r * per_row + s) * width);
  Node<T>* pa = a.node();
  return g.record(Shape{m * per_row, width}, std::move(out), {a},
                  [pa, m, n, per_row, width](Node<T>& self) {
                    auto& ga = pa->grad_buffer();
                    for (std::size_t r = 0; r < m; ++r)
                      for (std::size_t s = 0; s < per_row; ++s)
                        for (std::size_t k = 0; k < width; ++k)
                          ga[r * n + s + k] += self.grad[(r * per_row + s) * width + k];
                  },
                  "unfold_cols");
}

}  // namespace veracity::ad
