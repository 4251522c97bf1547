#pragma once

// Minimal reverse-mode differentiation over dense matrices. A Tape records
// every value produced during one forward pass together with a closure that
// pushes the output adjoint back to its inputs. Matrices are row = item
// (account, edge, sample), column = feature.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "rmnp/errors.hpp"
#include "rmnp/numerics.hpp"

namespace rmnp::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] double scalar() const { return value()(0, 0); }
};

using Index = std::vector<Eigen::Index>;

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  Tape() { nodes_.reserve(512); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix v) { return push(std::move(v), false, nullptr); }
  Var parameter(Matrix v) { return push(std::move(v), true, nullptr); }
  Var scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

  [[nodiscard]] const Matrix& value(const Var& v) const { return nodes_[v.id].value; }
  [[nodiscard]] bool requires_grad(const Var& v) const { return nodes_[v.id].requires_grad; }

  /// Adjoint of v after backward(); zero if nothing reached it.
  [[nodiscard]] Matrix grad(const Var& v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0) {
      return Matrix::Zero(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a 1x1 root.
  void backward(const Var& root) {
    if (root.tape != this) {
      throw ContractError("Tape::backward: root belongs to another tape");
    }
    if (value(root).size() != 1) {
      throw ContractError("Tape::backward: root must be a scalar");
    }
    nodes_[root.id].grad = Matrix::Ones(1, 1);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0 || !n.backward) {
        continue;
      }
      n.backward(*this, n.grad);
    }
  }

  /// Add g into the adjoint of v, if v needs one.
  template <class Expr>
  void accumulate(const Var& v, const Expr& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) {
      return;
    }
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  Var push(Matrix value, bool requires_grad, Backward bw) {
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, requires_grad ? std::move(bw) : nullptr});
    return Var{this, nodes_.size() - 1};
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(*this); }

namespace detail {

inline bool any_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs) {
    if (v.tape->requires_grad(v)) {
      return true;
    }
  }
  return false;
}

inline Tape& tape_of(const Var& a, const Var& b) {
  if (a.tape != b.tape) {
    throw ContractError("ad: operands live on different tapes");
  }
  return *a.tape;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// shape plumbing

/// Broadcast a 1x1, 1xc or rx1 value to rows x cols.
inline Var broadcast(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  const Matrix& v = a.value();
  if (v.rows() == rows && v.cols() == cols) {
    return a;
  }
  const bool row_ok = v.rows() == rows || v.rows() == 1;
  const bool col_ok = v.cols() == cols || v.cols() == 1;
  if (!row_ok || !col_ok) {
    throw ContractError("ad::broadcast: incompatible shapes");
  }
  Matrix out = v.replicate(v.rows() == rows ? 1 : rows, v.cols() == cols ? 1 : cols);
  const Eigen::Index in_rows = v.rows();
  const Eigen::Index in_cols = v.cols();
  return a.tape->push(std::move(out), detail::any_grad({a}), [a, in_rows, in_cols](Tape& t, const Matrix& g) {
    if (in_rows == 1 && in_cols == 1) {
      t.accumulate(a, Matrix::Constant(1, 1, g.sum()));
    } else if (in_rows == 1) {
      t.accumulate(a, g.colwise().sum());
    } else {
      t.accumulate(a, g.rowwise().sum());
    }
  });
}

namespace detail {
inline std::pair<Var, Var> align(const Var& a, const Var& b) {
  const Eigen::Index r = std::max(a.rows(), b.rows());
  const Eigen::Index c = std::max(a.cols(), b.cols());
  return {broadcast(a, r, c), broadcast(b, r, c)};
}
}  // namespace detail

inline Var transpose(const Var& a) {
  return a.tape->push(a.value().transpose(), detail::any_grad({a}),
                      [a](Tape& t, const Matrix& g) { t.accumulate(a, g.transpose()); });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) {
    throw ContractError("ad::concat_cols: nothing to concatenate");
  }
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool rg = false;
  for (const Var& p : parts) {
    if (p.rows() != rows) {
      throw ContractError("ad::concat_cols: row counts differ");
    }
    cols += p.cols();
    rg = rg || p.tape->requires_grad(p);
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts.front().tape->push(std::move(out), rg, [parts](Tape& t, const Matrix& g) {
    Eigen::Index off = 0;
    for (const Var& p : parts) {
      t.accumulate(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) {
    throw ContractError("ad::concat_rows: nothing to concatenate");
  }
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool rg = false;
  for (const Var& p : parts) {
    if (p.cols() != cols) {
      throw ContractError("ad::concat_rows: column counts differ");
    }
    rows += p.rows();
    rg = rg || p.tape->requires_grad(p);
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return parts.front().tape->push(std::move(out), rg, [parts](Tape& t, const Matrix& g) {
    Eigen::Index off = 0;
    for (const Var& p : parts) {
      t.accumulate(p, g.middleRows(off, p.rows()));
      off += p.rows();
    }
  });
}

inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ContractError("ad::slice_rows: range out of bounds");
  }
  const Eigen::Index total = a.rows();
  return a.tape->push(a.value().middleRows(start, count), detail::any_grad({a}),
                      [a, start, count, total](Tape& t, const Matrix& g) {
                        Matrix full = Matrix::Zero(total, g.cols());
                        full.middleRows(start, count) = g;
                        t.accumulate(a, full);
                      });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ContractError("ad::slice_cols: range out of bounds");
  }
  const Eigen::Index total = a.cols();
  return a.tape->push(a.value().middleCols(start, count), detail::any_grad({a}),
                      [a, start, count, total](Tape& t, const Matrix& g) {
                        Matrix full = Matrix::Zero(g.rows(), total);
                        full.middleCols(start, count) = g;
                        t.accumulate(a, full);
                      });
}

/// out[k] = a[idx[k]]
inline Var gather_rows(const Var& a, const Index& idx) {
  const Matrix& v = a.value();
  Matrix out(static_cast<Eigen::Index>(idx.size()), v.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= v.rows()) {
      throw ContractError("ad::gather_rows: index out of range");
    }
    out.row(static_cast<Eigen::Index>(k)) = v.row(idx[k]);
  }
  auto shared = std::make_shared<const Index>(idx);
  const Eigen::Index in_rows = v.rows();
  return a.tape->push(std::move(out), detail::any_grad({a}), [a, shared, in_rows](Tape& t, const Matrix& g) {
    Matrix acc = Matrix::Zero(in_rows, g.cols());
    for (std::size_t k = 0; k < shared->size(); ++k) {
      acc.row((*shared)[k]) += g.row(static_cast<Eigen::Index>(k));
    }
    t.accumulate(a, acc);
  });
}

/// out[idx[k]] += a[k], out has n rows.
inline Var scatter_add_rows(const Var& a, const Index& idx, Eigen::Index n) {
  const Matrix& v = a.value();
  if (static_cast<Eigen::Index>(idx.size()) != v.rows()) {
    throw ContractError("ad::scatter_add_rows: one target index per row required");
  }
  Matrix out = Matrix::Zero(n, v.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= n) {
      throw ContractError("ad::scatter_add_rows: index out of range");
    }
    out.row(idx[k]) += v.row(static_cast<Eigen::Index>(k));
  }
  auto shared = std::make_shared<const Index>(idx);
  return a.tape->push(std::move(out), detail::any_grad({a}), [a, shared](Tape& t, const Matrix& g) {
    Matrix back(static_cast<Eigen::Index>(shared->size()), g.cols());
    for (std::size_t k = 0; k < shared->size(); ++k) {
      back.row(static_cast<Eigen::Index>(k)) = g.row((*shared)[k]);
    }
    t.accumulate(a, back);
  });
}

// ---------------------------------------------------------------------------
// arithmetic

inline Var matmul(const Var& a, const Var& b) {
  Tape& tape = detail::tape_of(a, b);
  if (a.cols() != b.rows()) {
    throw ContractError("ad::matmul: inner dimensions differ");
  }
  Matrix out = a.value() * b.value();
  return tape.push(std::move(out), detail::any_grad({a, b}), [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) {
      t.accumulate(a, g * b.value().transpose());
    }
    if (t.requires_grad(b)) {
      t.accumulate(b, a.value().transpose() * g);
    }
  });
}

inline Var add(const Var& x, const Var& y) {
  auto [a, b] = detail::align(x, y);
  Tape& tape = detail::tape_of(a, b);
  return tape.push(a.value() + b.value(), detail::any_grad({a, b}), [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(const Var& x, const Var& y) {
  auto [a, b] = detail::align(x, y);
  Tape& tape = detail::tape_of(a, b);
  return tape.push(a.value() - b.value(), detail::any_grad({a, b}), [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

/// Elementwise product.
inline Var mul(const Var& x, const Var& y) {
  auto [a, b] = detail::align(x, y);
  Tape& tape = detail::tape_of(a, b);
  return tape.push(a.value().cwiseProduct(b.value()), detail::any_grad({a, b}), [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) {
      t.accumulate(a, g.cwiseProduct(b.value()));
    }
    if (t.requires_grad(b)) {
      t.accumulate(b, g.cwiseProduct(a.value()));
    }
  });
}

/// Elementwise quotient.
inline Var div(const Var& x, const Var& y) {
  auto [a, b] = detail::align(x, y);
  Tape& tape = detail::tape_of(a, b);
  Matrix out = a.value().cwiseQuotient(b.value());
  return tape.push(std::move(out), detail::any_grad({a, b}), [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) {
      t.accumulate(a, g.cwiseQuotient(b.value()));
    }
    if (t.requires_grad(b)) {
      const Matrix& bv = b.value();
      t.accumulate(b, -g.cwiseProduct(a.value()).cwiseQuotient(bv.cwiseProduct(bv)));
    }
  });
}

inline Var scale(const Var& a, double c) {
  return a.tape->push(a.value() * c, detail::any_grad({a}), [a, c](Tape& t, const Matrix& g) { t.accumulate(a, g * c); });
}

inline Var add_scalar(const Var& a, double c) {
  return a.tape->push(a.value().array() + c, detail::any_grad({a}),
                      [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return scale(a, -1.0); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }
inline Var operator+(double c, const Var& a) { return add_scalar(a, c); }
inline Var operator-(const Var& a, double c) { return add_scalar(a, -c); }
inline Var operator-(double c, const Var& a) { return add_scalar(scale(a, -1.0), c); }

// ---------------------------------------------------------------------------
// elementwise maps

/// y = f(x) elementwise with dy/dx = df(x, y).
template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
  Matrix out = a.value().unaryExpr(f);
  if (!a.tape->requires_grad(a)) {
    return a.tape->constant(std::move(out));
  }
  Matrix deriv = a.value().binaryExpr(out, df);
  return a.tape->push(std::move(out), true,
                      [a, deriv = std::move(deriv)](Tape& t, const Matrix& g) { t.accumulate(a, g.cwiseProduct(deriv)); });
}

inline Var leaky_relu(const Var& a, double slope) {
  return unary(
      a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

inline Var softplus(const Var& a) {
  return unary(a, [](double x) { return numerics::softplus(x); }, [](double x, double) { return numerics::sigmoid(x); });
}

inline Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(const Var& a) {
  return unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

inline Var reciprocal(const Var& a) {
  return unary(a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

inline Var abs(const Var& a) {
  return unary(a, [](double x) { return std::abs(x); }, [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

/// Clamp into [lo, hi]; the gradient is zero where the clamp is active.
inline Var clamp(const Var& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

inline Var lgamma(const Var& a) {
  return unary(a, [](double x) { return numerics::ln_gamma(x); }, [](double x, double) { return numerics::digamma(x); });
}

inline Var digamma(const Var& a) {
  return unary(a, [](double x) { return numerics::digamma(x); }, [](double x, double) { return numerics::trigamma(x); });
}

// ---------------------------------------------------------------------------
// reductions

inline Var sum(const Var& a) {
  const Eigen::Index r = a.rows();
  const Eigen::Index c = a.cols();
  return a.tape->push(Matrix::Constant(1, 1, a.value().sum()), detail::any_grad({a}),
                      [a, r, c](Tape& t, const Matrix& g) { t.accumulate(a, Matrix::Constant(r, c, g(0, 0))); });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// rows x 1
inline Var row_sum(const Var& a) {
  const Eigen::Index c = a.cols();
  return a.tape->push(a.value().rowwise().sum(), detail::any_grad({a}),
                      [a, c](Tape& t, const Matrix& g) { t.accumulate(a, g.replicate(1, c)); });
}

/// 1 x cols
inline Var col_mean(const Var& a) {
  const Eigen::Index r = a.rows();
  return a.tape->push(a.value().colwise().mean(), detail::any_grad({a}),
                      [a, r](Tape& t, const Matrix& g) { t.accumulate(a, g.replicate(r, 1) / static_cast<double>(r)); });
}

/// Numerically stable softmax of each row.
inline Var softmax_rows(const Var& a) {
  const Matrix& v = a.value();
  Matrix out(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const double mx = v.row(i).maxCoeff();
    out.row(i) = (v.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  if (!a.tape->requires_grad(a)) {
    return a.tape->constant(std::move(out));
  }
  return a.tape->push(out, true, [a, y = out](Tape& t, const Matrix& g) {
    // dx = y * (g - <g, y>)
    const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    Matrix dx = y.cwiseProduct(g - dot.replicate(1, g.cols()));
    t.accumulate(a, dx);
  });
}

/// Softmax of a column of logits within each segment (segment[k] in [0, n)).
/// Segments with no members are left untouched.
inline Var segment_softmax(const Var& logits, const Index& segment, Eigen::Index n) {
  const Matrix& v = logits.value();
  if (v.cols() != 1 || static_cast<Eigen::Index>(segment.size()) != v.rows()) {
    throw ContractError("ad::segment_softmax: expects one logit column with one segment id per row");
  }
  Eigen::VectorXd mx = Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k < segment.size(); ++k) {
    mx[segment[k]] = std::max(mx[segment[k]], v(static_cast<Eigen::Index>(k), 0));
  }
  Matrix out(v.rows(), 1);
  Eigen::VectorXd denom = Eigen::VectorXd::Zero(n);
  for (std::size_t k = 0; k < segment.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    out(r, 0) = std::exp(v(r, 0) - mx[segment[k]]);
    denom[segment[k]] += out(r, 0);
  }
  for (std::size_t k = 0; k < segment.size(); ++k) {
    out(static_cast<Eigen::Index>(k), 0) /= denom[segment[k]];
  }
  if (!logits.tape->requires_grad(logits)) {
    return logits.tape->constant(std::move(out));
  }
  auto seg = std::make_shared<const Index>(segment);
  return logits.tape->push(out, true, [logits, seg, n, y = out](Tape& t, const Matrix& g) {
    Eigen::VectorXd dot = Eigen::VectorXd::Zero(n);
    for (std::size_t k = 0; k < seg->size(); ++k) {
      const auto r = static_cast<Eigen::Index>(k);
      dot[(*seg)[k]] += g(r, 0) * y(r, 0);
    }
    Matrix dx(y.rows(), 1);
    for (std::size_t k = 0; k < seg->size(); ++k) {
      const auto r = static_cast<Eigen::Index>(k);
      dx(r, 0) = y(r, 0) * (g(r, 0) - dot[(*seg)[k]]);
    }
    t.accumulate(logits, dx);
  });
}

}  // namespace rmnp::ad
