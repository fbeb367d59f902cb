#pragma once

// Matrix-valued reverse-mode differentiation. A Tape records every operation
// applied to its Vars; `backward` walks the records in reverse and
// accumulates adjoints. Scalars are 1x1 matrices.

#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "multist/linalg.hpp"

namespace multist::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  double scalar() const { return value()(0, 0); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }
  Var constant_scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }
  Var parameter(Matrix value) { return push(std::move(value), true, nullptr); }

  /// Records a derived node. `backward` is skipped when no input needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || nodes_[static_cast<std::size_t>(v.id())].needs_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  /// Adjoint of a node after `backward`; zero when the node was not reached.
  Matrix grad(const Var& v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  const Matrix& upstream(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  template <class Expr>
  void accumulate(const Var& v, const Expr& g) {
    Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void backward(const Var& root) {
    require(root.rows() == 1 && root.cols() == 1, ErrorCode::DimensionMismatch,
            "backward requires a scalar root");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[static_cast<std::size_t>(root.id())].grad = Matrix::Ones(1, 1);
    for (int id = root.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.backward && n.grad.size() != 0) n.backward(*this, id);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Backward backward;
  };

  Var push(Matrix value, bool needs_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), needs_grad, std::move(backward)});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), ErrorCode::DimensionMismatch, "matmul inner dimensions differ");
  Tape& t = *a.tape();
  return t.record(a.value() * b.value(), {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    if (t.needs_grad(a.id())) t.accumulate(a, g * b.value().transpose());
    if (t.needs_grad(b.id())) t.accumulate(b, a.value().transpose() * g);
  });
}

/// a * b^T
inline Var matmul_bt(Var a, Var b) {
  require(a.cols() == b.cols(), ErrorCode::DimensionMismatch, "matmul_bt widths differ");
  Tape& t = *a.tape();
  return t.record(a.value() * b.value().transpose(), {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    if (t.needs_grad(a.id())) t.accumulate(a, g * b.value());
    if (t.needs_grad(b.id())) t.accumulate(b, g.transpose() * a.value());
  });
}

inline Var transpose(Var a) {
  Tape& t = *a.tape();
  return t.record(a.value().transpose(), {a},
                  [a](Tape& t, int self) { t.accumulate(a, t.upstream(self).transpose()); });
}

// ---------------------------------------------------------------------------
// Elementwise binary ops (same shape)

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::DimensionMismatch,
          std::string(op) + ": operand shapes differ");
}

inline Var operator+(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tape& t = *a.tape();
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& t, int self) {
    t.accumulate(a, t.upstream(self));
    t.accumulate(b, t.upstream(self));
  });
}

inline Var operator-(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tape& t = *a.tape();
  return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& t, int self) {
    t.accumulate(a, t.upstream(self));
    t.accumulate(b, -t.upstream(self));
  });
}

inline Var hadamard(Var a, Var b) {
  require_same_shape(a, b, "hadamard");
  Tape& t = *a.tape();
  return t.record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    if (t.needs_grad(a.id())) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.needs_grad(b.id())) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

inline Var operator*(Var a, double s) {
  Tape& t = *a.tape();
  return t.record(a.value() * s, {a}, [a, s](Tape& t, int self) { t.accumulate(a, t.upstream(self) * s); });
}
inline Var operator*(double s, Var a) { return a * s; }
inline Var operator-(Var a) { return a * -1.0; }

inline Var operator+(Var a, double s) {
  Tape& t = *a.tape();
  return t.record((a.value().array() + s).matrix(), {a},
                  [a](Tape& t, int self) { t.accumulate(a, t.upstream(self)); });
}
inline Var operator-(Var a, double s) { return a + (-s); }

/// Scales every entry of `a` by the 1x1 Var `s`.
inline Var scale_by(Var a, Var s) {
  require(s.rows() == 1 && s.cols() == 1, ErrorCode::DimensionMismatch, "scale_by expects a scalar");
  Tape& t = *a.tape();
  return t.record(a.value() * s.scalar(), {a, s}, [a, s](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    if (t.needs_grad(a.id())) t.accumulate(a, g * s.scalar());
    if (t.needs_grad(s.id())) t.accumulate(s, Matrix::Constant(1, 1, g.cwiseProduct(a.value()).sum()));
  });
}

// ---------------------------------------------------------------------------
// Broadcasting against a 1 x d row or an N x 1 column

enum class Broadcast { Add, Sub, Mul };

inline Var row_broadcast(Var a, Var row, Broadcast op) {
  require(row.rows() == 1 && row.cols() == a.cols(), ErrorCode::DimensionMismatch,
          "row broadcast width mismatch");
  Tape& t = *a.tape();
  Matrix out = a.value();
  const RowVector r = row.value().row(0);
  for (Index i = 0; i < out.rows(); ++i) {
    switch (op) {
      case Broadcast::Add: out.row(i) += r; break;
      case Broadcast::Sub: out.row(i) -= r; break;
      case Broadcast::Mul: out.row(i) = out.row(i).cwiseProduct(r); break;
    }
  }
  return t.record(std::move(out), {a, row}, [a, row, op](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    switch (op) {
      case Broadcast::Add:
        t.accumulate(a, g);
        t.accumulate(row, g.colwise().sum());
        break;
      case Broadcast::Sub:
        t.accumulate(a, g);
        t.accumulate(row, -g.colwise().sum());
        break;
      case Broadcast::Mul: {
        const RowVector r = row.value().row(0);
        if (t.needs_grad(a.id())) {
          Matrix ga = g;
          for (Index i = 0; i < ga.rows(); ++i) ga.row(i) = ga.row(i).cwiseProduct(r);
          t.accumulate(a, ga);
        }
        if (t.needs_grad(row.id())) t.accumulate(row, g.cwiseProduct(a.value()).colwise().sum());
        break;
      }
    }
  });
}

inline Var add_row(Var a, Var row) { return row_broadcast(a, row, Broadcast::Add); }
inline Var sub_row(Var a, Var row) { return row_broadcast(a, row, Broadcast::Sub); }
inline Var mul_row(Var a, Var row) { return row_broadcast(a, row, Broadcast::Mul); }

inline Var col_broadcast(Var a, Var col, Broadcast op) {
  require(col.cols() == 1 && col.rows() == a.rows(), ErrorCode::DimensionMismatch,
          "column broadcast height mismatch");
  Tape& t = *a.tape();
  Matrix out = a.value();
  const Vector c = col.value().col(0);
  for (Index j = 0; j < out.cols(); ++j) {
    switch (op) {
      case Broadcast::Add: out.col(j) += c; break;
      case Broadcast::Sub: out.col(j) -= c; break;
      case Broadcast::Mul: out.col(j) = out.col(j).cwiseProduct(c); break;
    }
  }
  return t.record(std::move(out), {a, col}, [a, col, op](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    switch (op) {
      case Broadcast::Add:
        t.accumulate(a, g);
        t.accumulate(col, g.rowwise().sum());
        break;
      case Broadcast::Sub:
        t.accumulate(a, g);
        t.accumulate(col, -g.rowwise().sum());
        break;
      case Broadcast::Mul: {
        const Vector c = col.value().col(0);
        if (t.needs_grad(a.id())) {
          Matrix ga = g;
          for (Index j = 0; j < ga.cols(); ++j) ga.col(j) = ga.col(j).cwiseProduct(c);
          t.accumulate(a, ga);
        }
        if (t.needs_grad(col.id())) t.accumulate(col, g.cwiseProduct(a.value()).rowwise().sum());
        break;
      }
    }
  });
}

inline Var add_col(Var a, Var col) { return col_broadcast(a, col, Broadcast::Add); }
inline Var sub_col(Var a, Var col) { return col_broadcast(a, col, Broadcast::Sub); }
inline Var mul_col(Var a, Var col) { return col_broadcast(a, col, Broadcast::Mul); }

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var a) {
  Tape& t = *a.tape();
  return t.record(Matrix::Constant(1, 1, a.value().sum()), {a}, [a](Tape& t, int self) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), t.upstream(self)(0, 0)));
  });
}

inline Var mean(Var a) { return sum(a) * (1.0 / static_cast<double>(a.value().size())); }

/// 1 x d column sums.
inline Var col_sum(Var a) {
  Tape& t = *a.tape();
  return t.record(a.value().colwise().sum(), {a}, [a](Tape& t, int self) {
    t.accumulate(a, t.upstream(self).replicate(a.rows(), 1));
  });
}

inline Var col_mean(Var a) { return col_sum(a) * (1.0 / static_cast<double>(a.rows())); }

/// N x 1 row sums.
inline Var row_sum(Var a) {
  Tape& t = *a.tape();
  return t.record(a.value().rowwise().sum(), {a}, [a](Tape& t, int self) {
    t.accumulate(a, t.upstream(self).replicate(1, a.cols()));
  });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops. `fn` maps x -> f(x); `dfn` maps (x, f(x)) -> f'(x).

template <class F, class DF>
Var unary(Var a, F fn, DF dfn) {
  Tape& t = *a.tape();
  Matrix out = a.value().unaryExpr(fn);
  return t.record(std::move(out), {a}, [a, dfn](Tape& t, int self) {
    const Matrix& x = a.value();
    const Matrix& y = t.value(self);
    Matrix d(x.rows(), x.cols());
    for (Index k = 0; k < x.size(); ++k) d(k) = dfn(x(k), y(k));
    t.accumulate(a, t.upstream(self).cwiseProduct(d));
  });
}

inline Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var leaky_relu(Var a, double slope = 0.2) {
  return unary(a, [slope](double x) { return x > 0.0 ? x : slope * x; },
               [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

inline Var elu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : std::expm1(x); },
               [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  return unary(a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(Var a) {
  return unary(a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return 0.5 / y; });
}

inline Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var pow(Var a, double p) {
  return unary(a, [p](double x) { return std::pow(x, p); },
               [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

/// log(1 + e^x), overflow-safe.
inline double softplus_value(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline Var softplus(Var a) {
  return unary(a, softplus_value, [](double x, double) { return sigmoid_value(x); });
}

// ---------------------------------------------------------------------------
// Structural ops

inline Var concat_cols(Var a, Var b) {
  require(a.rows() == b.rows(), ErrorCode::DimensionMismatch, "concat_cols row counts differ");
  Tape& t = *a.tape();
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    t.accumulate(a, g.leftCols(a.cols()));
    t.accumulate(b, g.rightCols(b.cols()));
  });
}

inline Var slice_cols(Var a, Index start, Index count) {
  require(start >= 0 && start + count <= a.cols(), ErrorCode::DimensionMismatch, "slice_cols out of range");
  Tape& t = *a.tape();
  return t.record(a.value().middleCols(start, count), {a}, [a, start, count](Tape& t, int self) {
    Matrix g = Matrix::Zero(a.rows(), a.cols());
    g.middleCols(start, count) = t.upstream(self);
    t.accumulate(a, g);
  });
}

inline Var gather_rows(Var a, std::vector<Index> rows) {
  Tape& t = *a.tape();
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Index>(r)) = a.value().row(rows[r]);
  return t.record(std::move(out), {a}, [a, rows = std::move(rows)](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    Matrix ga = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) ga.row(rows[r]) += g.row(static_cast<Index>(r));
    t.accumulate(a, ga);
  });
}

// ---------------------------------------------------------------------------
// Row-wise ops

/// Row-wise log-softmax. Entries where `mask` is zero are excluded from the
/// normalizer and come out as 0 (callers must not read them as probabilities).
inline Var row_log_softmax(Var a, const Matrix* mask = nullptr) {
  Tape& t = *a.tape();
  const Matrix& x = a.value();
  const Matrix inc = mask ? Matrix(mask->unaryExpr([](double m) { return m != 0.0 ? 1.0 : 0.0; }))
                          : Matrix(Matrix::Ones(x.rows(), x.cols()));
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  Matrix prob = Matrix::Zero(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < x.cols(); ++j)
      if (inc(i, j) != 0.0) mx = std::max(mx, x(i, j));
    double z = 0.0;
    for (Index j = 0; j < x.cols(); ++j)
      if (inc(i, j) != 0.0) z += std::exp(x(i, j) - mx);
    const double lz = mx + std::log(z);
    for (Index j = 0; j < x.cols(); ++j) {
      if (inc(i, j) != 0.0) {
        out(i, j) = x(i, j) - lz;
        prob(i, j) = std::exp(out(i, j));
      }
    }
  }
  return t.record(std::move(out), {a}, [a, inc, prob = std::move(prob)](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    // d/dx_ij = g_ij - p_ij * sum_k g_ik over included entries
    Matrix ga = Matrix::Zero(g.rows(), g.cols());
    for (Index i = 0; i < g.rows(); ++i) {
      double gs = 0.0;
      for (Index j = 0; j < g.cols(); ++j)
        if (inc(i, j) != 0.0) gs += g(i, j);
      for (Index j = 0; j < g.cols(); ++j)
        if (inc(i, j) != 0.0) ga(i, j) = g(i, j) - prob(i, j) * gs;
    }
    t.accumulate(a, ga);
  });
}

inline Var row_softmax(Var a) { return exp(row_log_softmax(a)); }

/// Divides each row by its L2 norm. Rows with norm below `floor` map to zero
/// and pass no gradient.
inline Var row_normalize(Var a, double floor = 1e-12) {
  Tape& t = *a.tape();
  const Matrix& x = a.value();
  Vector norms = x.rowwise().norm();
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i)
    if (norms(i) > floor) out.row(i) = x.row(i) / norms(i);
  return t.record(std::move(out), {a}, [a, norms, floor](Tape& t, int self) {
    const Matrix& g = t.upstream(self);
    const Matrix& y = t.value(self);
    Matrix ga = Matrix::Zero(g.rows(), g.cols());
    for (Index i = 0; i < g.rows(); ++i) {
      if (norms(i) <= floor) continue;
      const double dot = g.row(i).dot(y.row(i));
      ga.row(i) = (g.row(i) - dot * y.row(i)) / norms(i);
    }
    t.accumulate(a, ga);
  });
}

/// Mean binary cross-entropy of sigmoid(logits) against constant targets.
inline Var bce_with_logits(Var logits, const Matrix& targets) {
  require(logits.rows() == targets.rows() && logits.cols() == targets.cols(), ErrorCode::DimensionMismatch,
          "bce_with_logits shape mismatch");
  Tape& t = *logits.tape();
  const Matrix& s = logits.value();
  double total = 0.0;
  for (Index k = 0; k < s.size(); ++k) total += softplus_value(s(k)) - targets(k) * s(k);
  const double n = static_cast<double>(s.size());
  return t.record(Matrix::Constant(1, 1, total / n), {logits}, [logits, targets, n](Tape& t, int self) {
    const double g = t.upstream(self)(0, 0);
    const Matrix& s = logits.value();
    Matrix gl(s.rows(), s.cols());
    for (Index k = 0; k < s.size(); ++k) gl(k) = g * (sigmoid_value(s(k)) - targets(k)) / n;
    t.accumulate(logits, gl);
  });
}

/// Frobenius norm; zero input passes zero gradient.
inline Var frobenius(Var a) {
  Tape& t = *a.tape();
  const double nrm = a.value().norm();
  return t.record(Matrix::Constant(1, 1, nrm), {a}, [a, nrm](Tape& t, int self) {
    if (nrm == 0.0) return;
    t.accumulate(a, a.value() * (t.upstream(self)(0, 0) / nrm));
  });
}

}  // namespace multist::ad
