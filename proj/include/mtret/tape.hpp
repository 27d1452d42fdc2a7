#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mtret {

template <class Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using MaskX = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

template <class Scalar>
class TapeT;

// Lightweight handle to a tape node. Vars are cheap to copy; the tape owns
// all values and adjoints.
template <class Scalar>
class VarT {
 public:
  VarT() = default;

  int id() const { return id_; }
  TapeT<Scalar>* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr && id_ >= 0; }

  const MatX<Scalar>& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

 private:
  friend class TapeT<Scalar>;
  VarT(TapeT<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  TapeT<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

// Records primitive operations in creation order (which is a topological
// order by construction: parents always exist before their consumers).
// backward() replays the record once, in reverse.
template <class Scalar>
class TapeT {
 public:
  using Var = VarT<Scalar>;
  using Mat = MatX<Scalar>;

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  Var leaf(Mat value, bool requires_grad = true) {
    return push(std::move(value), {}, nullptr, requires_grad);
  }

  Var constant(Mat value) { return leaf(std::move(value), false); }

  Var scalar_constant(Scalar v) {
    Mat m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  // Accumulates reverse-mode gradients from a 1x1 loss node into every node
  // that leads to a grad-requiring leaf. A tape can be walked backward once;
  // build a fresh tape per step.
  void backward(Var loss) {
    check_mine(loss);
    const Node& ln = nodes_[static_cast<std::size_t>(loss.id())];
    if (ln.value.rows() != 1 || ln.value.cols() != 1) {
      throw std::invalid_argument("backward: loss must be a 1x1 scalar");
    }
    if (backward_done_) {
      throw std::logic_error("backward: tape already replayed; reset first");
    }
    backward_done_ = true;
    accumulate(loss.id(), Mat::Ones(1, 1));
    for (int id = loss.id(); id >= 0; --id) {
      Node& node = nodes_[static_cast<std::size_t>(id)];
      if (node.has_grad && node.backward) node.backward(*this);
    }
  }

  // Gradient of the last backward() w.r.t. `v`. Zero if the node was never
  // reached.
  const Mat& grad(Var v) {
    check_mine(v);
    Node& node = nodes_[static_cast<std::size_t>(v.id())];
    if (!node.has_grad) {
      node.grad = Mat::Zero(node.value.rows(), node.value.cols());
      node.has_grad = true;
    }
    return node.grad;
  }

  bool backward_done() const { return backward_done_; }
  std::size_t size() const { return nodes_.size(); }

  // --- used by the op free functions ---

  Var push(Mat value, std::vector<int> parents,
           std::function<void(TapeT&)> backward_fn, bool requires_grad = false) {
    bool needs = requires_grad;
    for (int p : parents) {
      needs = needs || nodes_[static_cast<std::size_t>(p)].needs_grad;
    }
    Node node;
    node.value = std::move(value);
    node.parents = std::move(parents);
    node.needs_grad = needs;
    if (needs) node.backward = std::move(backward_fn);
    nodes_.push_back(std::move(node));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Mat& value_of(int id) const {
    return nodes_[static_cast<std::size_t>(id)].value;
  }

  const Mat& grad_of(int id) const {
    return nodes_[static_cast<std::size_t>(id)].grad;
  }

  bool needs_grad(int id) const {
    return nodes_[static_cast<std::size_t>(id)].needs_grad;
  }

  template <class Expr>
  void accumulate(int id, const Expr& delta) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.needs_grad) return;
    if (!node.has_grad) {
      node.grad = Mat::Zero(node.value.rows(), node.value.cols());
      node.has_grad = true;
    }
    node.grad += delta;
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::vector<int> parents;
    std::function<void(TapeT&)> backward;
    bool needs_grad = false;
    bool has_grad = false;
  };

  void check_mine(Var v) const {
    if (v.tape() != this || v.id() < 0 ||
        v.id() >= static_cast<int>(nodes_.size())) {
      throw std::invalid_argument("var does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

template <class Scalar>
const MatX<Scalar>& VarT<Scalar>::value() const {
  return tape_->value_of(id_);
}

namespace detail {

template <class Scalar>
TapeT<Scalar>& same_tape(VarT<Scalar> a, VarT<Scalar> b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw std::invalid_argument("operands live on different tapes");
  }
  return *a.tape();
}

inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations. Free functions, eager evaluation, gradients recorded
// on the owning tape.
// ---------------------------------------------------------------------------

namespace detail {

// Pushes a node whose backward closure knows its own id (needed to read the
// node's value and adjoint during the reverse pass). The factory receives the
// id the node is about to get and returns the backward function.
template <class Scalar, class BackwardFactory>
VarT<Scalar> make_op(TapeT<Scalar>& tape, MatX<Scalar> value,
                     std::vector<int> parents, BackwardFactory&& factory) {
  const int self = static_cast<int>(tape.size());
  return tape.push(std::move(value), std::move(parents), factory(self));
}

}  // namespace detail

template <class Scalar>
VarT<Scalar> matmul(VarT<Scalar> a, VarT<Scalar> b) {
  auto& tape = detail::same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw std::invalid_argument(
        "matmul: inner extents differ (" + std::to_string(a.cols()) + " vs " +
        std::to_string(b.rows()) + ")");
  }
  const int ai = a.id(), bi = b.id();
  return detail::make_op(tape, MatX<Scalar>(a.value() * b.value()), {ai, bi},
                         [ai, bi](int self) {
                           return [ai, bi, self](TapeT<Scalar>& t) {
                             const auto& g = t.grad_of(self);
                             t.accumulate(ai, g * t.value_of(bi).transpose());
                             t.accumulate(bi, t.value_of(ai).transpose() * g);
                           };
                         });
}

template <class Scalar>
VarT<Scalar> transpose(VarT<Scalar> a) {
  auto& tape = *a.tape();
  const int ai = a.id();
  return detail::make_op(tape, MatX<Scalar>(a.value().transpose()), {ai},
                         [ai](int self) {
                           return [ai, self](TapeT<Scalar>& t) {
                             t.accumulate(ai, t.grad_of(self).transpose());
                           };
                         });
}

template <class Scalar>
VarT<Scalar> add(VarT<Scalar> a, VarT<Scalar> b) {
  auto& tape = detail::same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("add: shape mismatch");
  }
  const int ai = a.id(), bi = b.id();
  return detail::make_op(tape, MatX<Scalar>(a.value() + b.value()), {ai, bi},
                         [ai, bi](int self) {
                           return [ai, bi, self](TapeT<Scalar>& t) {
                             t.accumulate(ai, t.grad_of(self));
                             t.accumulate(bi, t.grad_of(self));
                           };
                         });
}

template <class Scalar>
VarT<Scalar> sub(VarT<Scalar> a, VarT<Scalar> b) {
  auto& tape = detail::same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("sub: shape mismatch");
  }
  const int ai = a.id(), bi = b.id();
  return detail::make_op(tape, MatX<Scalar>(a.value() - b.value()), {ai, bi},
                         [ai, bi](int self) {
                           return [ai, bi, self](TapeT<Scalar>& t) {
                             t.accumulate(ai, t.grad_of(self));
                             t.accumulate(bi, -t.grad_of(self));
                           };
                         });
}

template <class Scalar>
VarT<Scalar> scale(VarT<Scalar> a, Scalar c) {
  auto& tape = *a.tape();
  const int ai = a.id();
  return detail::make_op(tape, MatX<Scalar>(a.value() * c), {ai},
                         [ai, c](int self) {
                           return [ai, c, self](TapeT<Scalar>& t) {
                             t.accumulate(ai, t.grad_of(self) * c);
                           };
                         });
}

template <class Scalar>
VarT<Scalar> hadamard(VarT<Scalar> a, VarT<Scalar> b) {
  auto& tape = detail::same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("hadamard: shape mismatch");
  }
  const int ai = a.id(), bi = b.id();
  return detail::make_op(
      tape, MatX<Scalar>(a.value().cwiseProduct(b.value())), {ai, bi},
      [ai, bi](int self) {
        return [ai, bi, self](TapeT<Scalar>& t) {
          t.accumulate(ai, t.grad_of(self).cwiseProduct(t.value_of(bi)));
          t.accumulate(bi, t.grad_of(self).cwiseProduct(t.value_of(ai)));
        };
      });
}

// x: m x n, bias: 1 x n, added to every row.
template <class Scalar>
VarT<Scalar> add_row_broadcast(VarT<Scalar> x, VarT<Scalar> bias) {
  auto& tape = detail::same_tape(x, bias);
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw std::invalid_argument("add_row_broadcast: bias must be 1 x cols(x)");
  }
  MatX<Scalar> out = x.value();
  out.rowwise() += bias.value().row(0);
  const int xi = x.id(), bi = bias.id();
  return detail::make_op(tape, std::move(out), {xi, bi}, [xi, bi](int self) {
    return [xi, bi, self](TapeT<Scalar>& t) {
      t.accumulate(xi, t.grad_of(self));
      t.accumulate(bi, t.grad_of(self).colwise().sum());
    };
  });
}

// Repeats a 1 x n row m times.
template <class Scalar>
VarT<Scalar> tile_rows(VarT<Scalar> row, Eigen::Index m) {
  auto& tape = *row.tape();
  if (row.rows() != 1) throw std::invalid_argument("tile_rows: need a 1 x n row");
  MatX<Scalar> out = row.value().replicate(m, 1);
  const int ri = row.id();
  return detail::make_op(tape, std::move(out), {ri}, [ri](int self) {
    return [ri, self](TapeT<Scalar>& t) {
      t.accumulate(ri, t.grad_of(self).colwise().sum());
    };
  });
}

template <class Scalar>
VarT<Scalar> concat_rows(const std::vector<VarT<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  auto& tape = *parts.front().tape();
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.tape() != &tape) throw std::invalid_argument("concat_rows: tape mix");
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: col mismatch");
    rows += p.rows();
  }
  MatX<Scalar> out(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  ids.reserve(parts.size());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(r);
    r += p.rows();
  }
  return detail::make_op(tape, std::move(out), std::vector<int>(ids),
                         [ids, offsets](int self) {
                           return [ids, offsets, self](TapeT<Scalar>& t) {
                             const auto& g = t.grad_of(self);
                             for (std::size_t i = 0; i < ids.size(); ++i) {
                               const Eigen::Index nr = t.value_of(ids[i]).rows();
                               t.accumulate(ids[i], g.middleRows(offsets[i], nr));
                             }
                           };
                         });
}

template <class Scalar>
VarT<Scalar> concat_cols(const std::vector<VarT<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  auto& tape = *parts.front().tape();
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.tape() != &tape) throw std::invalid_argument("concat_cols: tape mix");
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  MatX<Scalar> out(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(c);
    c += p.cols();
  }
  return detail::make_op(tape, std::move(out), std::vector<int>(ids),
                         [ids, offsets](int self) {
                           return [ids, offsets, self](TapeT<Scalar>& t) {
                             const auto& g = t.grad_of(self);
                             for (std::size_t i = 0; i < ids.size(); ++i) {
                               const Eigen::Index nc = t.value_of(ids[i]).cols();
                               t.accumulate(ids[i], g.middleCols(offsets[i], nc));
                             }
                           };
                         });
}

template <class Scalar>
VarT<Scalar> concat_rows(std::initializer_list<VarT<Scalar>> parts) {
  return concat_rows(std::vector<VarT<Scalar>>(parts));
}

template <class Scalar>
VarT<Scalar> concat_cols(std::initializer_list<VarT<Scalar>> parts) {
  return concat_cols(std::vector<VarT<Scalar>>(parts));
}

template <class Scalar>
VarT<Scalar> slice_rows(VarT<Scalar> x, Eigen::Index r0, Eigen::Index nr) {
  auto& tape = *x.tape();
  if (r0 < 0 || nr < 0 || r0 + nr > x.rows()) {
    throw std::invalid_argument("slice_rows: range out of bounds");
  }
  const int xi = x.id();
  return detail::make_op(tape, MatX<Scalar>(x.value().middleRows(r0, nr)), {xi},
                         [xi, r0, nr](int self) {
                           return [xi, r0, nr, self](TapeT<Scalar>& t) {
                             const auto& g = t.grad_of(self);
                             MatX<Scalar> d = MatX<Scalar>::Zero(
                                 t.value_of(xi).rows(), t.value_of(xi).cols());
                             d.middleRows(r0, nr) = g;
                             t.accumulate(xi, d);
                           };
                         });
}

template <class Scalar>
VarT<Scalar> slice_cols(VarT<Scalar> x, Eigen::Index c0, Eigen::Index nc) {
  auto& tape = *x.tape();
  if (c0 < 0 || nc < 0 || c0 + nc > x.cols()) {
    throw std::invalid_argument("slice_cols: range out of bounds");
  }
  const int xi = x.id();
  return detail::make_op(tape, MatX<Scalar>(x.value().middleCols(c0, nc)), {xi},
                         [xi, c0, nc](int self) {
                           return [xi, c0, nc, self](TapeT<Scalar>& t) {
                             const auto& g = t.grad_of(self);
                             MatX<Scalar> d = MatX<Scalar>::Zero(
                                 t.value_of(xi).rows(), t.value_of(xi).cols());
                             d.middleCols(c0, nc) = g;
                             t.accumulate(xi, d);
                           };
                         });
}

// Gathers rows of an embedding table. Duplicate indices accumulate gradient,
// so shared rows receive the sum of their uses.
template <class Scalar>
VarT<Scalar> select_rows(VarT<Scalar> table, std::vector<Eigen::Index> idx) {
  auto& tape = *table.tape();
  MatX<Scalar> out(static_cast<Eigen::Index>(idx.size()), table.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= table.rows()) {
      throw std::invalid_argument("select_rows: index out of range");
    }
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(idx[i]);
  }
  const int ti = table.id();
  return detail::make_op(tape, std::move(out), {ti},
                         [ti, idx = std::move(idx)](int self) {
                           return [ti, idx, self](TapeT<Scalar>& t) {
                             const auto& g = t.grad_of(self);
                             MatX<Scalar> d = MatX<Scalar>::Zero(
                                 t.value_of(ti).rows(), t.value_of(ti).cols());
                             for (std::size_t i = 0; i < idx.size(); ++i) {
                               d.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                             }
                             t.accumulate(ti, d);
                           };
                         });
}

template <class Scalar>
VarT<Scalar> colwise_sum(VarT<Scalar> x) {
  auto& tape = *x.tape();
  const int xi = x.id();
  return detail::make_op(tape, MatX<Scalar>(x.value().colwise().sum()), {xi},
                         [xi](int self) {
                           return [xi, self](TapeT<Scalar>& t) {
                             const auto& g = t.grad_of(self);
                             t.accumulate(
                                 xi, g.replicate(t.value_of(xi).rows(), 1));
                           };
                         });
}

template <class Scalar>
VarT<Scalar> sum_all(VarT<Scalar> x) {
  auto& tape = *x.tape();
  MatX<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  const int xi = x.id();
  return detail::make_op(tape, std::move(out), {xi}, [xi](int self) {
    return [xi, self](TapeT<Scalar>& t) {
      const Scalar g = t.grad_of(self)(0, 0);
      t.accumulate(xi, MatX<Scalar>::Constant(t.value_of(xi).rows(),
                                              t.value_of(xi).cols(), g));
    };
  });
}

// Row-by-row inner products of two m x n matrices -> m x 1.
template <class Scalar>
VarT<Scalar> rowwise_dot(VarT<Scalar> a, VarT<Scalar> b) {
  auto& tape = detail::same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("rowwise_dot: shape mismatch");
  }
  MatX<Scalar> out = a.value().cwiseProduct(b.value()).rowwise().sum();
  const int ai = a.id(), bi = b.id();
  return detail::make_op(tape, std::move(out), {ai, bi}, [ai, bi](int self) {
    return [ai, bi, self](TapeT<Scalar>& t) {
      const auto& g = t.grad_of(self);
      t.accumulate(ai, g.col(0).asDiagonal() * t.value_of(bi));
      t.accumulate(bi, g.col(0).asDiagonal() * t.value_of(ai));
    };
  });
}

// Main diagonal of a square matrix as a column vector.
template <class Scalar>
VarT<Scalar> diag_as_col(VarT<Scalar> x) {
  auto& tape = *x.tape();
  if (x.rows() != x.cols()) {
    throw std::invalid_argument("diag_as_col: matrix must be square");
  }
  MatX<Scalar> out = x.value().diagonal();
  const int xi = x.id();
  return detail::make_op(tape, std::move(out), {xi}, [xi](int self) {
    return [xi, self](TapeT<Scalar>& t) {
      const auto& g = t.grad_of(self);
      MatX<Scalar> d =
          MatX<Scalar>::Zero(t.value_of(xi).rows(), t.value_of(xi).cols());
      d.diagonal() = g.col(0);
      t.accumulate(xi, d);
    };
  });
}

// Exact GeLU, x * Phi(x) with the Gaussian CDF written through erf.
template <class Scalar>
VarT<Scalar> gelu(VarT<Scalar> x) {
  auto& tape = *x.tape();
  MatX<Scalar> out = x.value().unaryExpr([](Scalar v) {
    const Scalar phi = Scalar(0.5) *
                       (Scalar(1) + std::erf(v * Scalar(detail::kInvSqrt2)));
    return v * phi;
  });
  const int xi = x.id();
  return detail::make_op(tape, std::move(out), {xi}, [xi](int self) {
    return [xi, self](TapeT<Scalar>& t) {
      const auto& xv = t.value_of(xi);
      MatX<Scalar> local = xv.unaryExpr([](Scalar v) {
        const Scalar cdf = Scalar(0.5) *
                           (Scalar(1) + std::erf(v * Scalar(detail::kInvSqrt2)));
        const Scalar pdf = Scalar(detail::kInvSqrt2Pi) *
                           std::exp(Scalar(-0.5) * v * v);
        return cdf + v * pdf;
      });
      t.accumulate(xi, t.grad_of(self).cwiseProduct(local));
    };
  });
}

// y_ij = x_ij / sqrt(mean_j(x_ij^2) + eps) * gain_j, per row.
template <class Scalar>
VarT<Scalar> rmsnorm(VarT<Scalar> x, VarT<Scalar> gain, Scalar eps) {
  auto& tape = detail::same_tape(x, gain);
  if (x.cols() < 1) throw std::invalid_argument("rmsnorm: need at least 1 col");
  if (!(eps > Scalar(0))) throw std::invalid_argument("rmsnorm: eps must be > 0");
  if (gain.rows() != 1 || gain.cols() != x.cols()) {
    throw std::invalid_argument("rmsnorm: gain must be 1 x cols(x)");
  }
  const Eigen::Index d = x.cols();
  MatX<Scalar> out(x.rows(), d);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar ms = x.value().row(i).squaredNorm() / Scalar(d);
    const Scalar r = Scalar(1) / std::sqrt(ms + eps);
    out.row(i) = (x.value().row(i) * r).cwiseProduct(gain.value().row(0));
  }
  const int xi = x.id(), gi = gain.id();
  return detail::make_op(tape, std::move(out), {xi, gi}, [xi, gi, eps](int self) {
    return [xi, gi, eps, self](TapeT<Scalar>& t) {
      const auto& xv = t.value_of(xi);
      const auto& gv = t.value_of(gi);
      const auto& g = t.grad_of(self);
      const Eigen::Index d = xv.cols();
      MatX<Scalar> dx = MatX<Scalar>::Zero(xv.rows(), d);
      MatX<Scalar> dgain = MatX<Scalar>::Zero(1, d);
      for (Eigen::Index i = 0; i < xv.rows(); ++i) {
        const Scalar ms = xv.row(i).squaredNorm() / Scalar(d);
        const Scalar r = Scalar(1) / std::sqrt(ms + eps);
        const auto gg = g.row(i).cwiseProduct(gv.row(0));
        const Scalar proj = gg.cwiseProduct(xv.row(i)).sum();
        dx.row(i) = r * gg - (r * r * r / Scalar(d)) * proj * xv.row(i);
        dgain.row(0) += g.row(i).cwiseProduct(xv.row(i) * r);
      }
      t.accumulate(xi, dx);
      t.accumulate(gi, dgain);
    };
  });
}

namespace detail {

// Stable row softmax of x / tau restricted to `allowed` entries; disallowed
// entries are excluded from the max and the sum entirely and produce exact
// zeros, so outputs at earlier positions never depend on later inputs.
template <class Scalar>
MatX<Scalar> masked_softmax_value(const MatX<Scalar>& x, const MaskX* allowed,
                                  Scalar tau) {
  MatX<Scalar> out = MatX<Scalar>::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    bool any = false;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (allowed && !(*allowed)(i, j)) continue;
      any = true;
      mx = std::max(mx, x(i, j) / tau);
    }
    if (!any) {
      throw std::invalid_argument("softmax: row has no admissible entries");
    }
    Scalar sum = Scalar(0);
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (allowed && !(*allowed)(i, j)) continue;
      const Scalar e = std::exp(x(i, j) / tau - mx);
      out(i, j) = e;
      sum += e;
    }
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (allowed && !(*allowed)(i, j)) continue;
      out(i, j) /= sum;
    }
  }
  return out;
}

template <class Scalar>
void softmax_backward_rows(TapeT<Scalar>& t, int xi, int self,
                           const MaskX* allowed, Scalar tau) {
  const auto& p = t.value_of(self);
  const auto& g = t.grad_of(self);
  MatX<Scalar> dx = MatX<Scalar>::Zero(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    Scalar dot = Scalar(0);
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      if (allowed && !(*allowed)(i, j)) continue;
      dot += g(i, j) * p(i, j);
    }
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      if (allowed && !(*allowed)(i, j)) continue;
      dx(i, j) = p(i, j) * (g(i, j) - dot) / tau;
    }
  }
  t.accumulate(xi, dx);
}

}  // namespace detail

// Softmax over the last axis (rows of a matrix), logits scaled by 1/tau.
template <class Scalar>
VarT<Scalar> softmax_rows(VarT<Scalar> x, Scalar tau = Scalar(1)) {
  auto& tape = *x.tape();
  if (!(tau > Scalar(0))) {
    throw std::invalid_argument("softmax: temperature must be > 0");
  }
  MatX<Scalar> out =
      detail::masked_softmax_value<Scalar>(x.value(), nullptr, tau);
  const int xi = x.id();
  return detail::make_op(tape, std::move(out), {xi}, [xi, tau](int self) {
    return [xi, tau, self](TapeT<Scalar>& t) {
      detail::softmax_backward_rows<Scalar>(t, xi, self, nullptr, tau);
    };
  });
}

// Softmax per row over the entries where `allowed` is true; the rest are
// exact zeros. Every row must have at least one admissible entry.
template <class Scalar>
VarT<Scalar> masked_softmax_rows(VarT<Scalar> x, MaskX allowed) {
  auto& tape = *x.tape();
  if (allowed.rows() != x.rows() || allowed.cols() != x.cols()) {
    throw std::invalid_argument("masked_softmax_rows: mask shape mismatch");
  }
  auto mask = std::make_shared<MaskX>(std::move(allowed));
  MatX<Scalar> out =
      detail::masked_softmax_value<Scalar>(x.value(), mask.get(), Scalar(1));
  const int xi = x.id();
  return detail::make_op(tape, std::move(out), {xi}, [xi, mask](int self) {
    return [xi, mask, self](TapeT<Scalar>& t) {
      detail::softmax_backward_rows<Scalar>(t, xi, self, mask.get(), Scalar(1));
    };
  });
}

// log(sum_j exp(x_ij)) per row -> m x 1, max-subtracted.
template <class Scalar>
VarT<Scalar> logsumexp_rows(VarT<Scalar> x) {
  auto& tape = *x.tape();
  MatX<Scalar> out(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar mx = x.value().row(i).maxCoeff();
    out(i, 0) = mx + std::log((x.value().row(i).array() - mx).exp().sum());
  }
  const int xi = x.id();
  return detail::make_op(tape, std::move(out), {xi}, [xi](int self) {
    return [xi, self](TapeT<Scalar>& t) {
      const auto& xv = t.value_of(xi);
      const auto& g = t.grad_of(self);
      MatX<Scalar> dx(xv.rows(), xv.cols());
      for (Eigen::Index i = 0; i < xv.rows(); ++i) {
        const Scalar mx = xv.row(i).maxCoeff();
        Eigen::Array<Scalar, 1, Eigen::Dynamic> e =
            (xv.row(i).array() - mx).exp();
        dx.row(i) = (e / e.sum()).matrix() * g(i, 0);
      }
      t.accumulate(xi, dx);
    };
  });
}

// Normalizes every row to unit L2 norm.
template <class Scalar>
VarT<Scalar> l2normalize_rows(VarT<Scalar> x) {
  auto& tape = *x.tape();
  MatX<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar n = x.value().row(i).norm();
    if (!(n > Scalar(0))) {
      throw std::domain_error("l2normalize_rows: zero-norm row");
    }
    out.row(i) = x.value().row(i) / n;
  }
  const int xi = x.id();
  return detail::make_op(tape, std::move(out), {xi}, [xi](int self) {
    return [xi, self](TapeT<Scalar>& t) {
      const auto& xv = t.value_of(xi);
      const auto& g = t.grad_of(self);
      MatX<Scalar> dx(xv.rows(), xv.cols());
      for (Eigen::Index i = 0; i < xv.rows(); ++i) {
        const Scalar n = xv.row(i).norm();
        const Scalar proj = g.row(i).dot(xv.row(i));
        dx.row(i) = g.row(i) / n - xv.row(i) * (proj / (n * n * n));
      }
      t.accumulate(xi, dx);
    };
  });
}

// Keeps the top `keep` entries per row of a nonnegative score matrix,
// renormalizes them to sum to one and zeroes the rest. Ties go to the lower
// column index. Gradient flows only through the kept entries.
template <class Scalar>
VarT<Scalar> topk_renorm_rows(VarT<Scalar> p, Eigen::Index keep) {
  auto& tape = *p.tape();
  if (keep < 1 || keep > p.cols()) {
    throw std::invalid_argument("topk_renorm_rows: keep out of range");
  }
  const Eigen::Index m = p.rows(), n = p.cols();
  auto kept = std::make_shared<std::vector<std::vector<Eigen::Index>>>();
  kept->resize(static_cast<std::size_t>(m));
  MatX<Scalar> out = MatX<Scalar>::Zero(m, n);
  for (Eigen::Index i = 0; i < m; ++i) {
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) {
                       return p.value()(i, a) > p.value()(i, b);
                     });
    order.resize(static_cast<std::size_t>(keep));
    std::sort(order.begin(), order.end());
    Scalar s = Scalar(0);
    for (Eigen::Index j : order) s += p.value()(i, j);
    for (Eigen::Index j : order) out(i, j) = p.value()(i, j) / s;
    (*kept)[static_cast<std::size_t>(i)] = std::move(order);
  }
  const int pi = p.id();
  return detail::make_op(tape, std::move(out), {pi}, [pi, kept](int self) {
    return [pi, kept, self](TapeT<Scalar>& t) {
      const auto& pv = t.value_of(pi);
      const auto& yv = t.value_of(self);
      const auto& g = t.grad_of(self);
      MatX<Scalar> dp = MatX<Scalar>::Zero(pv.rows(), pv.cols());
      for (Eigen::Index i = 0; i < pv.rows(); ++i) {
        const auto& sel = (*kept)[static_cast<std::size_t>(i)];
        Scalar s = Scalar(0), gy = Scalar(0);
        for (Eigen::Index j : sel) {
          s += pv(i, j);
          gy += g(i, j) * yv(i, j);
        }
        for (Eigen::Index j : sel) dp(i, j) = g(i, j) / s - gy / s;
      }
      t.accumulate(pi, dp);
    };
  });
}

// x_ij * col_i, the column vector broadcast across every column of x.
template <class Scalar>
VarT<Scalar> mul_col_broadcast(VarT<Scalar> x, VarT<Scalar> col) {
  auto& tape = detail::same_tape(x, col);
  if (col.cols() != 1 || col.rows() != x.rows()) {
    throw std::invalid_argument("mul_col_broadcast: need an m x 1 column");
  }
  MatX<Scalar> out = col.value().col(0).asDiagonal() * x.value();
  const int xi = x.id(), ci = col.id();
  return detail::make_op(tape, std::move(out), {xi, ci}, [xi, ci](int self) {
    return [xi, ci, self](TapeT<Scalar>& t) {
      const auto& g = t.grad_of(self);
      t.accumulate(xi, t.value_of(ci).col(0).asDiagonal() * g);
      t.accumulate(ci, g.cwiseProduct(t.value_of(xi)).rowwise().sum());
    };
  });
}

// Affine layer: x * w + bias broadcast over rows.
template <class Scalar>
VarT<Scalar> linear(VarT<Scalar> x, VarT<Scalar> w, VarT<Scalar> bias) {
  return add_row_broadcast(matmul(x, w), bias);
}

// Two-layer perceptron with GeLU in the middle.
template <class Scalar>
VarT<Scalar> mlp2(VarT<Scalar> x, VarT<Scalar> w1, VarT<Scalar> b1,
                  VarT<Scalar> w2, VarT<Scalar> b2) {
  return linear(gelu(linear(x, w1, b1)), w2, b2);
}

using Tape = TapeT<double>;
using Var = VarT<double>;
using Mat = MatX<double>;

}  // namespace mtret
