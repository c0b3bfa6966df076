#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Graph records every primitive application in creation order, which is a
// topological order, so backward() is a single reverse sweep. Values are
// immutable once recorded. Nodes that do not depend on a trainable leaf carry
// no pullback and are skipped during the sweep.

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace genalign::nd {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when a vector is too short to normalize (a collapsed embedding).
class DegenerateError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

template <typename Derived>
std::string shape_str(const Eigen::EigenBase<Derived>& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

template <typename Scalar>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the Graph lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;

  Graph<Scalar>* graph() const { return graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Matrix<Scalar>& value() const { return graph_->value(*this); }
  const Matrix<Scalar>& grad() const { return graph_->grad(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const { return graph_->requires_grad(*this); }
  Scalar item() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("item() on non-scalar " + shape_str(value()));
    return value()(0, 0);
  }

 private:
  friend class Graph<Scalar>;
  Var(Graph<Scalar>* g, int id) : graph_(g), id_(id) {}

  Graph<Scalar>* graph_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
class Graph {
 public:
  using Mat = Matrix<Scalar>;
  using Pullback = std::function<void(Graph&, const Mat&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  // Vars and recorded pullbacks hold the graph's address.
  Graph(Graph&&) = delete;
  Graph& operator=(Graph&&) = delete;

  /// Trainable leaf.
  Var<Scalar> variable(Mat value) { return push(std::move(value), true, nullptr); }
  /// Non-trainable leaf; gradients never flow into it.
  Var<Scalar> constant(Mat value) { return push(std::move(value), false, nullptr); }

  /// Records a primitive. The pullback is kept only if some input is trainable.
  Var<Scalar> record(Mat value, std::initializer_list<Var<Scalar>> inputs, Pullback pullback) {
    return record(std::move(value), std::span<const Var<Scalar>>(inputs.begin(), inputs.size()),
                  std::move(pullback));
  }

  Var<Scalar> record(Mat value, std::span<const Var<Scalar>> inputs, Pullback pullback) {
    bool any = false;
    for (const auto& v : inputs) {
      check_owned(v);
      any = any || nodes_[v.id()].requires_grad;
    }
    if (!value.allFinite()) throw std::domain_error("non-finite value produced by primitive");
    return push(std::move(value), any, any ? std::move(pullback) : nullptr);
  }

  const Mat& value(const Var<Scalar>& v) const {
    check_owned(v);
    return nodes_[v.id()].value;
  }

  const Mat& grad(const Var<Scalar>& v) const {
    check_owned(v);
    auto& n = nodes_[v.id()];
    if (!n.has_grad) {
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  bool requires_grad(const Var<Scalar>& v) const {
    check_owned(v);
    return nodes_[v.id()].requires_grad;
  }

  /// Adds `g` into the gradient of `v`. No-op for non-trainable nodes.
  template <typename Derived>
  void accumulate(const Var<Scalar>& v, const Eigen::MatrixBase<Derived>& g) {
    auto& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols()) {
      throw ShapeError("gradient shape " + shape_str(g) + " does not match value " + shape_str(n.value));
    }
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  /// Backpropagates from a scalar loss with seed 1.
  /// True for trainable leaves created with variable().
  bool is_variable(int id) const {
    const auto& n = nodes_.at(static_cast<std::size_t>(id));
    return n.requires_grad && !n.pullback;
  }

  void backward(const Var<Scalar>& loss) {
    check_owned(loss, "backward on a Var from another graph (detached)");
    const auto& v = nodes_[loss.id()].value;
    if (v.rows() != 1 || v.cols() != 1) throw GraphError("backward requires a scalar loss, got " + shape_str(v));
    backward(loss, Mat::Ones(1, 1));
  }

  /// Backpropagates an explicit upstream gradient. Allowed once per graph.
  void backward(const Var<Scalar>& output, const Mat& seed) {
    check_owned(output, "backward on a Var from another graph (detached)");
    if (backward_done_) throw GraphError("backward called twice on the same graph");
    backward_done_ = true;
    accumulate(output, seed);
    for (int id = output.id(); id >= 0; --id) {
      auto& n = nodes_[id];
      if (!n.requires_grad || !n.has_grad || !n.pullback) continue;
      n.pullback(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    mutable Mat grad;
    mutable bool has_grad = false;
    bool requires_grad = false;
    Pullback pullback;
  };

  Var<Scalar> push(Mat value, bool requires_grad, Pullback pullback) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.pullback = std::move(pullback);
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  void check_owned(const Var<Scalar>& v, const char* what = "Var does not belong to this graph") const {
    if (v.graph() != this || v.id() < 0 || v.id() >= static_cast<int>(nodes_.size())) throw GraphError(what);
  }

  // deque keeps references to node values stable while recording
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

namespace detail {

template <typename Scalar>
void require_same_shape(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  }
}

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& x) {
  Matrix<Scalar> y = x.colwise() - x.rowwise().maxCoeff();
  y = y.array().exp();
  y.array().colwise() /= y.rowwise().sum().array();
  return y;
}

template <typename Scalar>
Matrix<Scalar> log_softmax_rows(const Matrix<Scalar>& x) {
  Matrix<Scalar> shifted = x.colwise() - x.rowwise().maxCoeff();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> lse = shifted.array().exp().rowwise().sum().log();
  shifted.colwise() -= lse;
  return shifted;
}

inline void check_axis(int axis) {
  if (axis != 0 && axis != 1) throw ShapeError("axis must be 0 or 1, got " + std::to_string(axis));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.value()) + " x " + shape_str(b.value()));
  }
  auto* g = a.graph();
  return g->record(a.value() * b.value(), {a, b}, [a, b](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    if (g.requires_grad(a)) g.accumulate(a, up * g.value(b).transpose());
    if (g.requires_grad(b)) g.accumulate(b, g.value(a).transpose() * up);
  });
}

/// Elementwise sum. `b` may also be a single row broadcast over the rows of `a`.
template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto* g = a.graph();
  if (b.rows() == 1 && a.rows() != 1 && b.cols() == a.cols()) {
    Matrix<Scalar> out = a.value().rowwise() + b.value().row(0);
    return g->record(std::move(out), {a, b}, [a, b](Graph<Scalar>& g, const Matrix<Scalar>& up) {
      g.accumulate(a, up);
      if (g.requires_grad(b)) g.accumulate(b, up.colwise().sum());
    });
  }
  detail::require_same_shape("add", a, b);
  return g->record(a.value() + b.value(), {a, b}, [a, b](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    g.accumulate(a, up);
    g.accumulate(b, up);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape("sub", a, b);
  return a.graph()->record(a.value() - b.value(), {a, b}, [a, b](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    g.accumulate(a, up);
    if (g.requires_grad(b)) g.accumulate(b, -up);
  });
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape("mul", a, b);
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return a.graph()->record(std::move(out), {a, b}, [a, b](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    if (g.requires_grad(a)) g.accumulate(a, up.cwiseProduct(g.value(b)));
    if (g.requires_grad(b)) g.accumulate(b, up.cwiseProduct(g.value(a)));
  });
}

template <typename Scalar>
Var<Scalar> scalar_mul(const Var<Scalar>& a, Scalar c) {
  return a.graph()->record(a.value() * c, {a}, [a, c](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    g.accumulate(a, up * c);
  });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  Matrix<Scalar> out = a.value().transpose();
  return a.graph()->record(std::move(out), {a}, [a](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    g.accumulate(a, up.transpose());
  });
}

/// Row-major reshape.
template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Index rows, Index cols) {
  if (rows <= 0 || cols <= 0 || rows * cols != a.value().size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.value()) + " as [" + std::to_string(rows) + "x" +
                     std::to_string(cols) + "]");
  }
  Matrix<Scalar> out = Eigen::Map<const Matrix<Scalar>>(a.value().data(), rows, cols);
  const Index r0 = a.rows(), c0 = a.cols();
  return a.graph()->record(std::move(out), {a}, [a, r0, c0](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    g.accumulate(a, Eigen::Map<const Matrix<Scalar>>(up.data(), r0, c0));
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts[0].cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].value()) + " vs " + shape_str(p.value()));
    }
    rows += p.rows();
  }
  Matrix<Scalar> out(rows, cols);
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var<Scalar>> inputs(parts.begin(), parts.end());
  return parts[0].graph()->record(std::move(out), parts, [inputs](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    Index r = 0;
    for (const auto& p : inputs) {
      const Index n = p.rows();
      if (g.requires_grad(p)) g.accumulate(p, up.middleRows(r, n));
      r += n;
    }
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::initializer_list<Var<Scalar>> parts) {
  return concat_rows(std::span<const Var<Scalar>>(parts.begin(), parts.size()));
}

template <typename Scalar>
Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Index cols = 0;
  const Index rows = parts[0].rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].value()) + " vs " + shape_str(p.value()));
    }
    cols += p.cols();
  }
  Matrix<Scalar> out(rows, cols);
  Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var<Scalar>> inputs(parts.begin(), parts.end());
  return parts[0].graph()->record(std::move(out), parts, [inputs](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    Index c = 0;
    for (const auto& p : inputs) {
      const Index n = p.cols();
      if (g.requires_grad(p)) g.accumulate(p, up.middleCols(c, n));
      c += n;
    }
  });
}

template <typename Scalar>
Var<Scalar> concat_cols(std::initializer_list<Var<Scalar>> parts) {
  return concat_cols(std::span<const Var<Scalar>>(parts.begin(), parts.size()));
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& a, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > a.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) + ") out of " +
                     shape_str(a.value()));
  }
  Matrix<Scalar> out = a.value().middleRows(start, count);
  return a.graph()->record(std::move(out), {a}, [a, start, count](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    Matrix<Scalar> full = Matrix<Scalar>::Zero(g.value(a).rows(), g.value(a).cols());
    full.middleRows(start, count) = up;
    g.accumulate(a, full);
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) + ") out of " +
                     shape_str(a.value()));
  }
  Matrix<Scalar> out = a.value().middleCols(start, count);
  return a.graph()->record(std::move(out), {a}, [a, start, count](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    Matrix<Scalar> full = Matrix<Scalar>::Zero(g.value(a).rows(), g.value(a).cols());
    full.middleCols(start, count) = up;
    g.accumulate(a, full);
  });
}

/// Gathers rows by index; repeated indices are allowed.
template <typename Scalar>
Var<Scalar> select_rows(const Var<Scalar>& a, std::span<const int> rows) {
  if (rows.empty()) throw ShapeError("select_rows: empty index set");
  Matrix<Scalar> out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) {
      throw ShapeError("select_rows: index " + std::to_string(rows[i]) + " out of " + shape_str(a.value()));
    }
    out.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return a.graph()->record(std::move(out), {a}, [a, idx](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    Matrix<Scalar> full = Matrix<Scalar>::Zero(g.value(a).rows(), g.value(a).cols());
    for (std::size_t i = 0; i < idx.size(); ++i) full.row(idx[i]) += up.row(static_cast<Index>(i));
    g.accumulate(a, full);
  });
}

/// Copies `a` with the listed rows overwritten by the single row `token`.
template <typename Scalar>
Var<Scalar> replace_rows(const Var<Scalar>& a, const Var<Scalar>& token, std::span<const int> rows) {
  if (token.rows() != 1 || token.cols() != a.cols()) {
    throw ShapeError("replace_rows: token " + shape_str(token.value()) + " does not fit rows of " +
                     shape_str(a.value()));
  }
  std::vector<char> hit(static_cast<std::size_t>(a.rows()), 0);
  for (int r : rows) {
    if (r < 0 || r >= a.rows()) throw ShapeError("replace_rows: index " + std::to_string(r) + " out of range");
    hit[static_cast<std::size_t>(r)] = 1;
  }
  Matrix<Scalar> out = a.value();
  for (Index r = 0; r < a.rows(); ++r) {
    if (hit[static_cast<std::size_t>(r)]) out.row(r) = token.value().row(0);
  }
  return a.graph()->record(std::move(out), {a, token}, [a, token, hit](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    if (g.requires_grad(a)) {
      Matrix<Scalar> ga = up;
      for (Index r = 0; r < ga.rows(); ++r) {
        if (hit[static_cast<std::size_t>(r)]) ga.row(r).setZero();
      }
      g.accumulate(a, ga);
    }
    if (g.requires_grad(token)) {
      Matrix<Scalar> gt = Matrix<Scalar>::Zero(1, up.cols());
      for (Index r = 0; r < up.rows(); ++r) {
        if (hit[static_cast<std::size_t>(r)]) gt += up.row(r);
      }
      g.accumulate(token, gt);
    }
  });
}

template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& a, int axis = 1) {
  detail::check_axis(axis);
  Matrix<Scalar> y = axis == 1 ? detail::softmax_rows<Scalar>(a.value())
                               : Matrix<Scalar>(detail::softmax_rows<Scalar>(a.value().transpose()).transpose());
  Matrix<Scalar> y_copy = y;
  return a.graph()->record(std::move(y), {a}, [a, axis, y_copy](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    if (axis == 1) {
      Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = up.cwiseProduct(y_copy).rowwise().sum();
      g.accumulate(a, y_copy.cwiseProduct(up - dot.replicate(1, up.cols())));
    } else {
      Eigen::Matrix<Scalar, 1, Eigen::Dynamic> dot = up.cwiseProduct(y_copy).colwise().sum();
      g.accumulate(a, y_copy.cwiseProduct(up - dot.replicate(up.rows(), 1)));
    }
  });
}

template <typename Scalar>
Var<Scalar> log_softmax(const Var<Scalar>& a, int axis = 1) {
  detail::check_axis(axis);
  Matrix<Scalar> y = axis == 1 ? detail::log_softmax_rows<Scalar>(a.value())
                               : Matrix<Scalar>(detail::log_softmax_rows<Scalar>(a.value().transpose()).transpose());
  Matrix<Scalar> p = y.array().exp();
  return a.graph()->record(std::move(y), {a}, [a, axis, p](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    if (axis == 1) {
      Eigen::Matrix<Scalar, Eigen::Dynamic, 1> s = up.rowwise().sum();
      g.accumulate(a, up - p.cwiseProduct(s.replicate(1, up.cols())));
    } else {
      Eigen::Matrix<Scalar, 1, Eigen::Dynamic> s = up.colwise().sum();
      g.accumulate(a, up - p.cwiseProduct(s.replicate(up.rows(), 1)));
    }
  });
}

/// Normalizes each row over its columns, then applies the per-column affine
/// map. Only the last axis (axis = 1) is supported.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       Scalar eps = Scalar(1e-5), int axis = 1) {
  if (axis != 1) throw ShapeError("layer_norm: only axis 1 is supported");
  if (!(eps > 0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const Index n = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
    throw ShapeError("layer_norm: gamma " + shape_str(gamma.value()) + " / beta " + shape_str(beta.value()) +
                     " do not match " + shape_str(x.value()));
  }
  const auto& xv = x.value();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean = xv.rowwise().mean();
  Matrix<Scalar> centered = xv.colwise() - mean;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std =
      ((centered.array().square().rowwise().sum() / Scalar(n)) + eps).rsqrt();
  Matrix<Scalar> xhat = centered.array().colwise() * inv_std.array();
  Matrix<Scalar> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return x.graph()->record(std::move(out), {x, gamma, beta},
                           [x, gamma, beta, xhat, inv_std, n](Graph<Scalar>& g, const Matrix<Scalar>& up) {
                             if (g.requires_grad(gamma)) g.accumulate(gamma, up.cwiseProduct(xhat).colwise().sum());
                             if (g.requires_grad(beta)) g.accumulate(beta, up.colwise().sum());
                             if (g.requires_grad(x)) {
                               Matrix<Scalar> dxhat = up.array().rowwise() * g.value(gamma).row(0).array();
                               Eigen::Matrix<Scalar, Eigen::Dynamic, 1> m1 = dxhat.rowwise().mean();
                               Eigen::Matrix<Scalar, Eigen::Dynamic, 1> m2 =
                                   dxhat.cwiseProduct(xhat).rowwise().sum() / Scalar(n);
                               Matrix<Scalar> dx = dxhat.colwise() - m1;
                               dx -= (xhat.array().colwise() * m2.array()).matrix();
                               dx.array().colwise() *= inv_std.array();
                               g.accumulate(x, dx);
                             }
                           });
}

/// Exact (erf-based) GELU.
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& a) {
  const Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  Matrix<Scalar> out = a.value().unaryExpr([inv_sqrt2](Scalar v) {
    return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2));
  });
  return a.graph()->record(std::move(out), {a}, [a, inv_sqrt2](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    const Scalar inv_sqrt_2pi = Scalar(0.39894228040143267794);
    Matrix<Scalar> d = g.value(a).unaryExpr([inv_sqrt2, inv_sqrt_2pi](Scalar v) {
      return Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
    });
    g.accumulate(a, up.cwiseProduct(d));
  });
}

/// Scales each row (axis 1) or column (axis 0) to unit Euclidean norm.
/// Throws DegenerateError if any norm is below eps.
template <typename Scalar>
Var<Scalar> l2_normalize(const Var<Scalar>& a, int axis = 1, Scalar eps = Scalar(1e-12)) {
  detail::check_axis(axis);
  if (!(eps > 0)) throw std::invalid_argument("l2_normalize: eps must be positive");
  const bool rows = axis == 1;
  Matrix<Scalar> v = rows ? a.value() : Matrix<Scalar>(a.value().transpose());
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> norms = v.rowwise().norm();
  for (Index i = 0; i < norms.size(); ++i) {
    if (!(norms(i) >= eps)) {
      throw DegenerateError("l2_normalize: norm " + std::to_string(static_cast<double>(norms(i))) + " below eps");
    }
  }
  Matrix<Scalar> y = v.array().colwise() / norms.array();
  Matrix<Scalar> out = rows ? y : Matrix<Scalar>(y.transpose());
  return a.graph()->record(std::move(out), {a}, [a, rows, y, norms](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    Matrix<Scalar> u = rows ? up : Matrix<Scalar>(up.transpose());
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = u.cwiseProduct(y).rowwise().sum();
    Matrix<Scalar> dx = u - (y.array().colwise() * dot.array()).matrix();
    dx.array().colwise() /= norms.array();
    if (rows) {
      g.accumulate(a, dx);
    } else {
      g.accumulate(a, dx.transpose());
    }
  });
}

/// Row-wise CE(p, q) = -sum_c p_c log q_c, given log q. Returns a column.
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& p_target, const Var<Scalar>& log_q) {
  detail::require_same_shape("cross_entropy", p_target, log_q);
  Matrix<Scalar> out = -(p_target.value().cwiseProduct(log_q.value()).rowwise().sum());
  return p_target.graph()->record(std::move(out), {p_target, log_q},
                                  [p_target, log_q](Graph<Scalar>& g, const Matrix<Scalar>& up) {
                                    const Index k = g.value(log_q).cols();
                                    Matrix<Scalar> w = up.replicate(1, k);
                                    if (g.requires_grad(log_q)) g.accumulate(log_q, -w.cwiseProduct(g.value(p_target)));
                                    if (g.requires_grad(p_target)) g.accumulate(p_target, -w.cwiseProduct(g.value(log_q)));
                                  });
}

/// Elementwise binary cross-entropy between sigmoid(logits) and targets.
template <typename Scalar>
Var<Scalar> binary_cross_entropy_with_logits(const Var<Scalar>& logits, const Var<Scalar>& targets) {
  detail::require_same_shape("binary_cross_entropy_with_logits", logits, targets);
  const auto& x = logits.value();
  const auto& t = targets.value();
  Matrix<Scalar> out = x.cwiseMax(Scalar(0)) - x.cwiseProduct(t) +
                       Matrix<Scalar>((-x.cwiseAbs()).array().exp().log1p());
  return logits.graph()->record(std::move(out), {logits, targets},
                                [logits, targets](Graph<Scalar>& g, const Matrix<Scalar>& up) {
                                  const auto& x = g.value(logits);
                                  if (g.requires_grad(logits)) {
                                    Matrix<Scalar> sig = x.unaryExpr([](Scalar v) {
                                      return v >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-v))
                                                    : std::exp(v) / (Scalar(1) + std::exp(v));
                                    });
                                    g.accumulate(logits, up.cwiseProduct(sig - g.value(targets)));
                                  }
                                  if (g.requires_grad(targets)) g.accumulate(targets, -up.cwiseProduct(x));
                                });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph()->record(std::move(out), {a}, [a](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    g.accumulate(a, Matrix<Scalar>::Constant(g.value(a).rows(), g.value(a).cols(), up(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  const Scalar n = static_cast<Scalar>(a.value().size());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return a.graph()->record(std::move(out), {a}, [a, n](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    g.accumulate(a, Matrix<Scalar>::Constant(g.value(a).rows(), g.value(a).cols(), up(0, 0) / n));
  });
}

/// Column-wise mean over rows, giving a single row.
template <typename Scalar>
Var<Scalar> mean_rows(const Var<Scalar>& a) {
  const Index n = a.rows();
  Matrix<Scalar> out = a.value().colwise().mean();
  return a.graph()->record(std::move(out), {a}, [a, n](Graph<Scalar>& g, const Matrix<Scalar>& up) {
    g.accumulate(a, (up / static_cast<Scalar>(n)).replicate(n, 1));
  });
}

/// Constant copy of `a`; gradients stop here.
template <typename Scalar>
Var<Scalar> detach(const Var<Scalar>& a) {
  return a.graph()->constant(a.value());
}

}  // namespace genalign::nd
