#pragma once

// Reverse-mode differentiation over dense row-major arrays.
//
// A Tensor owns values and (optionally) an accumulated gradient. A Tape is a
// dynamic, per-step record of primitive operations; nodes are appended in
// creation order, which is a topological order, so backward() simply walks
// the node list in reverse. Leaves created from a Tensor push their gradient
// back into that Tensor when backward() finishes, adding to whatever is
// already there.
//
// Every array is viewed as a matrix: rank 0 -> 1x1, rank 1 {n} -> 1xn,
// rank >= 2 -> shape[0] x product(rest). Broadcasting works on that view.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lods {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) {
    if (e < 0) throw std::invalid_argument("negative extent in shape " + to_string(shape));
    n *= e;
  }
  return n;
}

inline std::pair<Index, Index> matrix_extents(const Shape& shape) {
  if (shape.empty()) return {1, 1};
  if (shape.size() == 1) return {1, shape[0]};
  Index cols = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) cols *= shape[i];
  return {shape[0], cols};
}

template <class Scalar>
class Tensor {
 public:
  using Matrix = Mat<Scalar>;

  Tensor() : Tensor(Shape{0}) {}

  explicit Tensor(Shape shape, bool requires_grad = false)
      : shape_(std::move(shape)), requires_grad_(requires_grad) {
    auto [r, c] = matrix_extents(shape_);
    numel(shape_);
    value_ = Matrix::Zero(r, c);
  }

  Tensor(Shape shape, Matrix values, bool requires_grad = false)
      : shape_(std::move(shape)), value_(std::move(values)), requires_grad_(requires_grad) {
    auto [r, c] = matrix_extents(shape_);
    if (value_.rows() != r || value_.cols() != c)
      throw std::invalid_argument("tensor values " + std::to_string(value_.rows()) + "x" +
                                  std::to_string(value_.cols()) + " do not fit shape " +
                                  to_string(shape_));
  }

  Tensor(Shape shape, const std::vector<Scalar>& data, bool requires_grad = false)
      : Tensor(std::move(shape), requires_grad) {
    if (static_cast<Index>(data.size()) != size())
      throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + to_string(shape_));
    std::copy(data.begin(), data.end(), value_.data());
  }

  static Tensor scalar(Scalar v) { return Tensor(Shape{}, std::vector<Scalar>{v}); }

  const Shape& shape() const { return shape_; }
  Index size() const { return value_.size(); }
  Index rows() const { return value_.rows(); }
  Index cols() const { return value_.cols(); }

  const Matrix& value() const { return value_; }
  Matrix& value() { return value_; }
  std::span<Scalar> data() { return {value_.data(), static_cast<std::size_t>(value_.size())}; }
  std::span<const Scalar> data() const {
    return {value_.data(), static_cast<std::size_t>(value_.size())};
  }
  Scalar item() const {
    if (size() != 1) throw std::invalid_argument("item() on tensor of shape " + to_string(shape_));
    return value_(0, 0);
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return grad_.has_value(); }
  const Matrix& grad() const {
    if (!grad_) throw std::logic_error("tensor has no gradient");
    return *grad_;
  }
  void accumulate_grad(const Matrix& g) {
    if (g.rows() != value_.rows() || g.cols() != value_.cols())
      throw std::invalid_argument("gradient extents do not match tensor shape " + to_string(shape_));
    if (grad_)
      *grad_ += g;
    else
      grad_ = g;
  }
  void zero_grad() { grad_.reset(); }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size())
      throw std::invalid_argument("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    auto [r, c] = matrix_extents(shape);
    Matrix v = Eigen::Map<const Matrix>(value_.data(), r, c);
    return Tensor(std::move(shape), std::move(v), requires_grad_);
  }

  template <class Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, value_.template cast<Other>(), requires_grad_);
  }

 private:
  Shape shape_;
  Matrix value_;
  std::optional<Matrix> grad_;
  bool requires_grad_ = false;
};

template <class Scalar>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
template <class Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  const Mat<Scalar>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return tape_->shape(*this); }
  bool requires_grad() const { return tape_->requires_grad(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Tape<Scalar>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

template <class Scalar>
class Tape {
 public:
  using Matrix = Mat<Scalar>;
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf bound to `t`. Tracks gradient iff t.requires_grad(); `t` must outlive backward().
  Var<Scalar> leaf(Tensor<Scalar>& t) {
    Node n;
    n.shape = t.shape();
    n.value = t.value();
    n.requires_grad = t.requires_grad();
    n.leaf = t.requires_grad() ? &t : nullptr;
    return push(std::move(n));
  }

  Var<Scalar> constant(const Tensor<Scalar>& t) { return constant(t.shape(), t.value()); }

  Var<Scalar> constant(Shape shape, Matrix value) {
    auto [r, c] = matrix_extents(shape);
    if (value.rows() != r || value.cols() != c)
      throw std::invalid_argument("constant values do not fit shape " + to_string(shape));
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Records a custom primitive. The node tracks gradient iff any input does;
  /// `fn` receives d(root)/d(output) and calls accumulate() on its inputs.
  Var<Scalar> record(Shape shape, Matrix value, const std::vector<Var<Scalar>>& inputs, Backward fn) {
    auto [r, c] = matrix_extents(shape);
    if (value.rows() != r || value.cols() != c)
      throw std::invalid_argument("primitive output does not fit shape " + to_string(shape));
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    for (const auto& in : inputs) {
      check_owned(in);
      n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  /// Adds `g` into the pending gradient of `v`; ignored for nodes that do not track gradient.
  void accumulate(const Var<Scalar>& v, const Matrix& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
      throw std::logic_error("backward produced gradient of wrong extent for node of shape " +
                             to_string(n.shape));
    if (n.has_grad)
      n.grad += g;
    else {
      n.grad = g;
      n.has_grad = true;
    }
  }

  /// Populates d(root)/d(leaf) for every tracking leaf. Root must be a scalar.
  void backward(const Var<Scalar>& root) {
    check_owned(root);
    if (nodes_[root.id()].value.size() != 1)
      throw std::invalid_argument("backward root must be scalar, got shape " +
                                  to_string(nodes_[root.id()].shape));
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad.resize(0, 0);
    }
    visited_ = 0;
    accumulate(root, Matrix::Ones(1, 1));
    for (int i = root.id(); i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.requires_grad) continue;
      ++visited_;
      if (n.backward) n.backward(*this, n.grad);
      if (n.leaf) n.leaf->accumulate_grad(n.grad);
    }
  }

  const Matrix& value(const Var<Scalar>& v) const { return nodes_.at(v.id()).value; }
  const Shape& shape(const Var<Scalar>& v) const { return nodes_.at(v.id()).shape; }
  bool requires_grad(const Var<Scalar>& v) const { return nodes_.at(v.id()).requires_grad; }

  std::size_t size() const { return nodes_.size(); }
  /// Nodes that received gradient during the last backward().
  std::size_t last_visit_count() const { return visited_; }

 private:
  struct Node {
    Shape shape;
    Matrix value;
    Matrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
    Tensor<Scalar>* leaf = nullptr;
  };

  Var<Scalar> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, static_cast<int>(nodes_.size() - 1));
  }

  void check_owned(const Var<Scalar>& v) const {
    if (v.tape() != this || v.id() < 0 || v.id() >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("variable does not belong to this tape");
  }

  std::vector<Node> nodes_;
  std::size_t visited_ = 0;
};

namespace detail {

enum class Broadcast { Same, ScalarLhs, ScalarRhs, RowLhs, RowRhs, ColLhs, ColRhs };

inline Broadcast classify(const char* op, const Shape& sa, Index ar, Index ac, const Shape& sb,
                          Index br, Index bc) {
  if (ar == br && ac == bc) return Broadcast::Same;
  if (br * bc == 1) return Broadcast::ScalarRhs;
  if (ar * ac == 1) return Broadcast::ScalarLhs;
  if (br == 1 && bc == ac) return Broadcast::RowRhs;
  if (ar == 1 && ac == bc) return Broadcast::RowLhs;
  if (bc == 1 && br == ar) return Broadcast::ColRhs;
  if (ac == 1 && ar == br) return Broadcast::ColLhs;
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + to_string(sa) + " vs " +
                              to_string(sb));
}

template <class Scalar>
Mat<Scalar> expand(const Mat<Scalar>& m, Index rows, Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  if (m.size() == 1) return Mat<Scalar>::Constant(rows, cols, m(0, 0));
  if (m.rows() == 1) return m.replicate(rows, 1);
  return m.replicate(1, cols);
}

template <class Scalar>
Mat<Scalar> reduce_to(const Mat<Scalar>& g, Index rows, Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows * cols == 1) return Mat<Scalar>::Constant(1, 1, g.sum());
  if (rows == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

template <class Scalar>
Tape<Scalar>* same_tape(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.tape() != b.tape() || a.tape() == nullptr)
    throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  return a.tape();
}

template <class Scalar, class Fwd, class Da, class Db>
Var<Scalar> binary(const char* op, const Var<Scalar>& a, const Var<Scalar>& b, Fwd fwd, Da da,
                   Db db) {
  Tape<Scalar>* tape = same_tape(op, a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  Broadcast kind = classify(op, a.shape(), av.rows(), av.cols(), b.shape(), bv.rows(), bv.cols());
  bool lhs_big = kind == Broadcast::Same || kind == Broadcast::ScalarRhs ||
                 kind == Broadcast::RowRhs || kind == Broadcast::ColRhs;
  Shape out_shape = lhs_big ? a.shape() : b.shape();
  Index r = lhs_big ? av.rows() : bv.rows();
  Index c = lhs_big ? av.cols() : bv.cols();
  Mat<Scalar> ae = expand(av, r, c);
  Mat<Scalar> be = expand(bv, r, c);
  Mat<Scalar> out = fwd(ae, be);
  return tape->record(out_shape, std::move(out), {a, b},
                      [a, b, ae, be, da, db](Tape<Scalar>& t, const Mat<Scalar>& g) {
                        if (a.requires_grad())
                          t.accumulate(a, reduce_to<Scalar>(da(g, ae, be), a.rows(), a.cols()));
                        if (b.requires_grad())
                          t.accumulate(b, reduce_to<Scalar>(db(g, ae, be), b.rows(), b.cols()));
                      });
}

}  // namespace detail

template <class Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  using M = Mat<Scalar>;
  return detail::binary<Scalar>(
      "add", a, b, [](const M& x, const M& y) -> M { return x + y; },
      [](const M& g, const M&, const M&) -> M { return g; },
      [](const M& g, const M&, const M&) -> M { return g; });
}

template <class Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  using M = Mat<Scalar>;
  return detail::binary<Scalar>(
      "sub", a, b, [](const M& x, const M& y) -> M { return x - y; },
      [](const M& g, const M&, const M&) -> M { return g; },
      [](const M& g, const M&, const M&) -> M { return -g; });
}

/// Elementwise (Hadamard) product with broadcasting.
template <class Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  using M = Mat<Scalar>;
  return detail::binary<Scalar>(
      "mul", a, b, [](const M& x, const M& y) -> M { return x.cwiseProduct(y); },
      [](const M& g, const M&, const M& y) -> M { return g.cwiseProduct(y); },
      [](const M& g, const M& x, const M&) -> M { return g.cwiseProduct(x); });
}

template <class Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  return a.tape()->record(a.shape(), a.value() * s, {a},
                          [a, s](Tape<Scalar>& t, const Mat<Scalar>& g) { t.accumulate(a, g * s); });
}

template <class Scalar>
Var<Scalar> neg(const Var<Scalar>& a) {
  return scale(a, Scalar(-1));
}

/// Matrix product on the matrix views: [m,k] x [k,n] -> [m,n].
template <class Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tape<Scalar>* tape = detail::same_tape("matmul", a, b);
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: shape mismatch " + to_string(a.shape()) + " vs " +
                                to_string(b.shape()));
  Mat<Scalar> out = a.value() * b.value();
  Shape shape{out.rows(), out.cols()};
  return tape->record(shape, std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Mat<Scalar>& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

/// Repeats a single-row variable `rows` times.
template <class Scalar>
Var<Scalar> broadcast_rows(const Var<Scalar>& a, Index rows) {
  if (a.rows() != 1)
    throw std::invalid_argument("broadcast_rows: expected one row, got shape " + to_string(a.shape()));
  Mat<Scalar> out = a.value().replicate(rows, 1);
  return a.tape()->record(Shape{rows, a.cols()}, std::move(out), {a},
                          [a](Tape<Scalar>& t, const Mat<Scalar>& g) {
                            t.accumulate(a, g.colwise().sum());
                          });
}

/// Concatenates along columns; all parts need the same row count.
template <class Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Index rows = parts[0].rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.tape() != parts[0].tape())
      throw std::invalid_argument("concat_cols: operands live on different tapes");
    if (p.rows() != rows)
      throw std::invalid_argument("concat_cols: shape mismatch " + to_string(parts[0].shape()) +
                                  " vs " + to_string(p.shape()));
    cols += p.cols();
  }
  Mat<Scalar> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts[0].tape()->record(Shape{rows, cols}, std::move(out), parts,
                                 [parts](Tape<Scalar>& t, const Mat<Scalar>& g) {
                                   Index off = 0;
                                   for (const auto& p : parts) {
                                     if (p.requires_grad()) t.accumulate(p, g.middleCols(off, p.cols()));
                                     off += p.cols();
                                   }
                                 });
}

/// Selects rows of `table` by index; backward scatter-adds into the selected rows only.
template <class Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& table, const std::vector<Index>& ids) {
  const auto& tv = table.value();
  Mat<Scalar> out(static_cast<Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows())
      throw std::out_of_range("gather_rows: index " + std::to_string(ids[i]) + " outside table of shape " +
                              to_string(table.shape()));
    out.row(static_cast<Index>(i)) = tv.row(ids[i]);
  }
  Shape shape{out.rows(), out.cols()};
  return table.tape()->record(shape, std::move(out), {table},
                              [table, ids](Tape<Scalar>& t, const Mat<Scalar>& g) {
                                Mat<Scalar> gt = Mat<Scalar>::Zero(table.rows(), table.cols());
                                for (std::size_t i = 0; i < ids.size(); ++i)
                                  gt.row(ids[i]) += g.row(static_cast<Index>(i));
                                t.accumulate(table, gt);
                              });
}

template <class Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  if (numel(shape) != a.value().size())
    throw std::invalid_argument("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  auto [r, c] = matrix_extents(shape);
  Mat<Scalar> out = Eigen::Map<const Mat<Scalar>>(a.value().data(), r, c);
  return a.tape()->record(std::move(shape), std::move(out), {a},
                          [a](Tape<Scalar>& t, const Mat<Scalar>& g) {
                            t.accumulate(a, Eigen::Map<const Mat<Scalar>>(g.data(), a.rows(), a.cols()));
                          });
}

/// Same values, no gradient path.
template <class Scalar>
Var<Scalar> detach(const Var<Scalar>& a) {
  return a.tape()->constant(a.shape(), a.value());
}

template <class Scalar>
Tensor<Scalar> detach(const Tensor<Scalar>& a) {
  return Tensor<Scalar>(a.shape(), a.value(), false);
}

template <class Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Mat<Scalar> out = Mat<Scalar>::Constant(1, 1, a.value().sum());
  return a.tape()->record(Shape{}, std::move(out), {a}, [a](Tape<Scalar>& t, const Mat<Scalar>& g) {
    t.accumulate(a, Mat<Scalar>::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

template <class Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  const Scalar n = static_cast<Scalar>(a.value().size());
  Mat<Scalar> out = Mat<Scalar>::Constant(1, 1, a.value().sum() / n);
  return a.tape()->record(Shape{}, std::move(out), {a}, [a, n](Tape<Scalar>& t, const Mat<Scalar>& g) {
    t.accumulate(a, Mat<Scalar>::Constant(a.rows(), a.cols(), g(0, 0) / n));
  });
}

template <class Scalar>
Var<Scalar> square(const Var<Scalar>& a) {
  return a.tape()->record(a.shape(), a.value().array().square().matrix(), {a},
                          [a](Tape<Scalar>& t, const Mat<Scalar>& g) {
                            t.accumulate(a, (g.array() * a.value().array() * Scalar(2)).matrix());
                          });
}

template <class Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  Mat<Scalar> out = a.value().array().exp().matrix();
  return a.tape()->record(a.shape(), out, {a}, [a, out](Tape<Scalar>& t, const Mat<Scalar>& g) {
    t.accumulate(a, g.cwiseProduct(out));
  });
}

template <class Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  Mat<Scalar> out = (Scalar(1) / (Scalar(1) + (-a.value().array()).exp())).matrix();
  return a.tape()->record(a.shape(), out, {a}, [a, out](Tape<Scalar>& t, const Mat<Scalar>& g) {
    t.accumulate(a, (g.array() * out.array() * (Scalar(1) - out.array())).matrix());
  });
}

template <class Scalar>
Var<Scalar> tanh(const Var<Scalar>& a) {
  Mat<Scalar> out = a.value().array().tanh().matrix();
  return a.tape()->record(a.shape(), out, {a}, [a, out](Tape<Scalar>& t, const Mat<Scalar>& g) {
    t.accumulate(a, (g.array() * (Scalar(1) - out.array().square())).matrix());
  });
}

/// x * sigmoid(x).
template <class Scalar>
Var<Scalar> silu(const Var<Scalar>& a) {
  Mat<Scalar> s = (Scalar(1) / (Scalar(1) + (-a.value().array()).exp())).matrix();
  Mat<Scalar> out = a.value().cwiseProduct(s);
  return a.tape()->record(a.shape(), std::move(out), {a}, [a, s](Tape<Scalar>& t, const Mat<Scalar>& g) {
    auto x = a.value().array();
    auto sa = s.array();
    t.accumulate(a, (g.array() * (sa + x * sa * (Scalar(1) - sa))).matrix());
  });
}

/// Mean of squared residuals; a scalar.
template <class Scalar>
Var<Scalar> mse(const Var<Scalar>& a, const Var<Scalar>& b) {
  return mean(square(sub(a, b)));
}

template <class Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <class Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }
template <class Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) { return mul(a, b); }
template <class Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& a) { return scale(a, s); }
template <class Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, Scalar s) { return scale(a, s); }
template <class Scalar>
Var<Scalar> operator-(const Var<Scalar>& a) { return neg(a); }

}  // namespace lods
