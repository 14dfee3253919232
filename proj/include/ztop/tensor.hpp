#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ztop/errors.hpp"

namespace ztop {

using Index = Eigen::Index;

template <typename S>
class Tape;

namespace detail {

inline std::string shape_str(const std::vector<Index>& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline Index shape_size(const std::vector<Index>& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

}  // namespace detail

// Dense row-major tensor of rank 0..2 backed by an Eigen array.
// Value semantics; copying copies the data. When `tape` is non-null the
// tensor's value is also a node on that tape and participates in
// reverse-mode differentiation. Node ids are valid only for the lifetime
// of the tape that issued them.
template <typename S>
class Tensor {
 public:
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;
  using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Tensor() : data_(1) { data_[0] = S(0); }

  explicit Tensor(std::vector<Index> shape)
      : shape_(std::move(shape)), data_(detail::shape_size(shape_)) {
    check_dims();
    data_.setZero();
  }

  Tensor(std::vector<Index> shape, Array data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != detail::shape_size(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + detail::shape_str(shape_));
  }

  static Tensor scalar(S v) {
    Tensor t;
    t.data_[0] = v;
    return t;
  }

  static Tensor zeros(std::vector<Index> shape) { return Tensor(std::move(shape)); }

  static Tensor constant(std::vector<Index> shape, S v) {
    Tensor t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }

  static Tensor vector(const std::vector<S>& vals) {
    Tensor t({static_cast<Index>(vals.size())});
    for (std::size_t i = 0; i < vals.size(); ++i) t.data_[static_cast<Index>(i)] = vals[i];
    return t;
  }

  static Tensor matrix(Index rows, Index cols, const std::vector<S>& vals) {
    Tensor t({rows, cols});
    if (static_cast<Index>(vals.size()) != rows * cols)
      throw ShapeError("matrix literal size mismatch");
    for (std::size_t i = 0; i < vals.size(); ++i) t.data_[static_cast<Index>(i)] = vals[i];
    return t;
  }

  const std::vector<Index>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index size() const { return data_.size(); }

  // 2-D view convention: scalars are 1x1, rank-1 tensors are 1xn rows.
  Index rows() const { return rank() == 2 ? shape_[0] : 1; }
  Index cols() const {
    if (rank() == 2) return shape_[1];
    if (rank() == 1) return shape_[0];
    return 1;
  }

  Array& array() { return data_; }
  const Array& array() const { return data_; }

  S& operator[](Index i) { return data_[i]; }
  S operator[](Index i) const { return data_[i]; }

  S& at(Index r, Index c) { return data_[r * cols() + c]; }
  S at(Index r, Index c) const { return data_[r * cols() + c]; }

  S value() const {
    if (size() != 1) throw ShapeError("value() on non-scalar tensor " + detail::shape_str(shape_));
    return data_[0];
  }

  Eigen::Map<MatrixRM> mat() { return {data_.data(), rows(), cols()}; }
  Eigen::Map<const MatrixRM> mat() const { return {data_.data(), rows(), cols()}; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const { return data_.isFinite().all(); }

  // Copy of the value with no tape attachment.
  Tensor detached() const {
    Tensor t = *this;
    t.tape = nullptr;
    t.node = -1;
    return t;
  }

  bool tracked() const { return tape != nullptr && node >= 0; }

  Tape<S>* tape = nullptr;
  int node = -1;

 private:
  void check_dims() const {
    if (shape_.size() > 2) throw ShapeError("tensors of rank > 2 are not supported");
    for (Index d : shape_)
      if (d <= 0) throw ShapeError("non-positive dimension in shape " + detail::shape_str(shape_));
  }

  std::vector<Index> shape_;
  Array data_;
};

// Append-only record of one forward pass. Node ids are topologically
// ordered (every input id is smaller than its consumer's id) and
// backward() visits them exactly once in strictly decreasing order.
// A tape and its tensors are confined to one thread.
template <typename S>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, const Tensor<S>&)>;

  // Registers a leaf (parameter or input we want gradients for).
  int watch(Tensor<S>& t) {
    t.tape = this;
    t.node = record(nullptr, t.shape());
    return t.node;
  }

  int record(BackFn back, std::vector<Index> out_shape) {
    nodes_.push_back(Node{std::move(back), std::move(out_shape)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  int size() const { return static_cast<int>(nodes_.size()); }

  // Reverse sweep from a scalar loss. Fills the gradient slots of every
  // node reachable from the loss; everything else stays zero.
  void backward(const Tensor<S>& loss) {
    if (loss.size() != 1 || loss.rank() != 0)
      throw ShapeError("backward requires a scalar loss, got shape " +
                       detail::shape_str(loss.shape()));
    if (loss.tape != this || loss.node < 0)
      throw InvalidArgumentError("loss is not a node on this tape");
    grads_.assign(nodes_.size(), Tensor<S>());
    touched_.assign(nodes_.size(), 0);
    grads_[loss.node] = Tensor<S>::scalar(S(1));
    touched_[loss.node] = 1;
    for (int id = loss.node; id >= 0; --id) {
      if (!touched_[id] || !nodes_[id].back) continue;
      nodes_[id].back(*this, grads_[id]);
    }
  }

  void accumulate(int node, const Tensor<S>& g) {
    if (node < 0) return;  // untracked input
    if (touched_[node]) {
      grads_[node].array() += g.array();
    } else {
      grads_[node] = g.detached();
      touched_[node] = 1;
    }
  }

  // Gradient of the last backward() pass w.r.t. a tracked tensor.
  // Untouched nodes get a zero tensor of their recorded shape.
  Tensor<S> grad(const Tensor<S>& t) const {
    if (t.tape != this || t.node < 0)
      throw InvalidArgumentError("grad() of a tensor that is not on this tape");
    if (t.node < static_cast<int>(touched_.size()) && touched_[t.node])
      return grads_[t.node].detached();
    return Tensor<S>::zeros(nodes_[t.node].shape);
  }

 private:
  struct Node {
    BackFn back;  // null for leaves
    std::vector<Index> shape;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor<S>> grads_;
  std::vector<char> touched_;
};

namespace detail {

template <typename S>
Tape<S>* result_tape(const Tensor<S>& a) {
  return a.tape;
}

template <typename S>
Tape<S>* result_tape(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.tape && b.tape && a.tape != b.tape)
    throw InvalidArgumentError("operands live on different tapes");
  return a.tape ? a.tape : b.tape;
}

template <typename S>
void check_finite(const Tensor<S>& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + " produced non-finite values");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Recorded operations. Each returns a value tensor; when an input is on a
// tape the result is recorded there with a closure that routes upstream
// gradients to the inputs.
// ---------------------------------------------------------------------------

// Matrix product with numpy-style rank handling: a rank-1 left operand is
// a 1xk row, a rank-1 right operand is a kx1 column, and size-1 result
// dimensions introduced that way are squeezed away.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() == 0 || b.rank() == 0) throw ShapeError("matmul on rank-0 operand");
  const Index ar = a.rank() == 2 ? a.shape()[0] : 1;
  const Index ak = a.rank() == 2 ? a.shape()[1] : a.shape()[0];
  const Index bk = b.rank() == 2 ? b.shape()[0] : b.shape()[0];
  const Index bc = b.rank() == 2 ? b.shape()[1] : 1;
  if (ak != bk)
    throw ShapeError("matmul inner dimensions differ: " + detail::shape_str(a.shape()) + " x " +
                     detail::shape_str(b.shape()));

  using Map = Eigen::Map<const typename Tensor<S>::MatrixRM>;
  typename Tensor<S>::MatrixRM y = Map(a.array().data(), ar, ak) * Map(b.array().data(), bk, bc);

  std::vector<Index> out_shape;
  if (a.rank() == 2 && b.rank() == 2)
    out_shape = {ar, bc};
  else if (a.rank() == 1 && b.rank() == 2)
    out_shape = {bc};
  else if (a.rank() == 2 && b.rank() == 1)
    out_shape = {ar};
  // rank1 x rank1 -> scalar (empty shape)

  typename Tensor<S>::Array flat =
      Eigen::Map<const typename Tensor<S>::Array>(y.data(), y.size());
  Tensor<S> out(std::move(out_shape), std::move(flat));
  detail::check_finite(out, "matmul");

  if (Tape<S>* tp = detail::result_tape(a, b)) {
    const int an = a.node, bn = b.node;
    out.tape = tp;
    out.node = tp->record(
        [an, bn, av = a.detached(), bv = b.detached(), ar, ak, bk, bc](Tape<S>& t,
                                                                       const Tensor<S>& g) {
          using M = typename Tensor<S>::MatrixRM;
          using CMap = Eigen::Map<const M>;
          CMap gm(g.array().data(), ar, bc);
          if (an >= 0) {
            M da = gm * CMap(bv.array().data(), bk, bc).transpose();
            t.accumulate(an, Tensor<S>(av.shape(), Eigen::Map<const typename Tensor<S>::Array>(
                                                       da.data(), da.size())));
          }
          if (bn >= 0) {
            M db = CMap(av.array().data(), ar, ak).transpose() * gm;
            t.accumulate(bn, Tensor<S>(bv.shape(), Eigen::Map<const typename Tensor<S>::Array>(
                                                       db.data(), db.size())));
          }
        },
        out.shape());
  }
  return out;
}

// Elementwise sum; also accepts matrix + row-vector bias (the only
// broadcast this core supports).
template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  const bool bias_row = a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.shape()[0];
  if (!a.same_shape(b) && !bias_row)
    throw ShapeError("add shape mismatch: " + detail::shape_str(a.shape()) + " vs " +
                     detail::shape_str(b.shape()));

  Tensor<S> out = a.detached();
  if (bias_row) {
    auto m = out.mat();
    m.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.array().data(),
                                                                         b.shape()[0]);
  } else {
    out.array() += b.array();
  }

  if (Tape<S>* tp = detail::result_tape(a, b)) {
    const int an = a.node, bn = b.node;
    const Index rows = a.rows(), cols = a.cols();
    out.tape = tp;
    out.node = tp->record(
        [an, bn, bias_row, rows, cols, bshape = b.shape()](Tape<S>& t, const Tensor<S>& g) {
          if (an >= 0) t.accumulate(an, g);
          if (bn < 0) return;
          if (!bias_row) {
            t.accumulate(bn, g);
          } else {
            using M = typename Tensor<S>::MatrixRM;
            Eigen::Matrix<S, 1, Eigen::Dynamic> col_sum =
                Eigen::Map<const M>(g.array().data(), rows, cols).colwise().sum();
            t.accumulate(bn, Tensor<S>(bshape, Eigen::Map<const typename Tensor<S>::Array>(
                                                   col_sum.data(), col_sum.size())));
          }
        },
        out.shape());
  }
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b))
    throw ShapeError("sub shape mismatch: " + detail::shape_str(a.shape()) + " vs " +
                     detail::shape_str(b.shape()));
  Tensor<S> out = a.detached();
  out.array() -= b.array();
  if (Tape<S>* tp = detail::result_tape(a, b)) {
    const int an = a.node, bn = b.node;
    out.tape = tp;
    out.node = tp->record(
        [an, bn](Tape<S>& t, const Tensor<S>& g) {
          if (an >= 0) t.accumulate(an, g);
          if (bn >= 0) {
            Tensor<S> neg = g.detached();
            neg.array() = -neg.array();
            t.accumulate(bn, neg);
          }
        },
        out.shape());
  }
  return out;
}

// Hadamard product.
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b))
    throw ShapeError("mul shape mismatch: " + detail::shape_str(a.shape()) + " vs " +
                     detail::shape_str(b.shape()));
  Tensor<S> out = a.detached();
  out.array() *= b.array();
  if (Tape<S>* tp = detail::result_tape(a, b)) {
    const int an = a.node, bn = b.node;
    out.tape = tp;
    out.node = tp->record(
        [an, bn, av = a.detached(), bv = b.detached()](Tape<S>& t, const Tensor<S>& g) {
          if (an >= 0) {
            Tensor<S> da = g.detached();
            da.array() *= bv.array();
            t.accumulate(an, da);
          }
          if (bn >= 0) {
            Tensor<S> db = g.detached();
            db.array() *= av.array();
            t.accumulate(bn, db);
          }
        },
        out.shape());
  }
  return out;
}

template <typename S>
Tensor<S> scalar_mul(const Tensor<S>& a, S c) {
  Tensor<S> out = a.detached();
  out.array() *= c;
  if (Tape<S>* tp = detail::result_tape(a)) {
    const int an = a.node;
    out.tape = tp;
    out.node = tp->record(
        [an, c](Tape<S>& t, const Tensor<S>& g) {
          Tensor<S> da = g.detached();
          da.array() *= c;
          t.accumulate(an, da);
        },
        out.shape());
  }
  return out;
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& a) {
  Tensor<S> out = a.detached();
  out.array() = out.array().tanh();
  if (Tape<S>* tp = detail::result_tape(a)) {
    const int an = a.node;
    out.tape = tp;
    out.node = tp->record(
        [an, y = out.detached()](Tape<S>& t, const Tensor<S>& g) {
          Tensor<S> da = g.detached();
          da.array() *= (S(1) - y.array().square());
          t.accumulate(an, da);
        },
        out.shape());
  }
  return out;
}

// relu'(0) is taken as 0.
template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  Tensor<S> out = a.detached();
  out.array() = out.array().max(S(0));
  if (Tape<S>* tp = detail::result_tape(a)) {
    const int an = a.node;
    out.tape = tp;
    out.node = tp->record(
        [an, av = a.detached()](Tape<S>& t, const Tensor<S>& g) {
          Tensor<S> da = g.detached();
          da.array() *= (av.array() > S(0)).template cast<S>();
          t.accumulate(an, da);
        },
        out.shape());
  }
  return out;
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  if ((a.array() <= S(0)).any()) throw NumericError("log of non-positive value");
  Tensor<S> out = a.detached();
  out.array() = out.array().log();
  if (Tape<S>* tp = detail::result_tape(a)) {
    const int an = a.node;
    out.tape = tp;
    out.node = tp->record(
        [an, av = a.detached()](Tape<S>& t, const Tensor<S>& g) {
          Tensor<S> da = g.detached();
          da.array() /= av.array();
          t.accumulate(an, da);
        },
        out.shape());
  }
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  Tensor<S> out = Tensor<S>::scalar(a.array().sum());
  if (Tape<S>* tp = detail::result_tape(a)) {
    const int an = a.node;
    out.tape = tp;
    out.node = tp->record(
        [an, shape = a.shape()](Tape<S>& t, const Tensor<S>& g) {
          t.accumulate(an, Tensor<S>::constant(shape, g.array()[0]));
        },
        out.shape());
  }
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  const S inv = S(1) / static_cast<S>(a.size());
  Tensor<S> out = Tensor<S>::scalar(a.array().sum() * inv);
  if (Tape<S>* tp = detail::result_tape(a)) {
    const int an = a.node;
    out.tape = tp;
    out.node = tp->record(
        [an, shape = a.shape(), inv](Tape<S>& t, const Tensor<S>& g) {
          t.accumulate(an, Tensor<S>::constant(shape, g.array()[0] * inv));
        },
        out.shape());
  }
  return out;
}

// Column means of a matrix: [r,c] -> [c].
template <typename S>
Tensor<S> mean_rows(const Tensor<S>& a) {
  if (a.rank() != 2) throw ShapeError("mean_rows expects a rank-2 tensor");
  const Index r = a.shape()[0], c = a.shape()[1];
  Eigen::Matrix<S, 1, Eigen::Dynamic> m = a.mat().colwise().mean();
  Tensor<S> out({c}, Eigen::Map<const typename Tensor<S>::Array>(m.data(), c));
  if (Tape<S>* tp = detail::result_tape(a)) {
    const int an = a.node;
    out.tape = tp;
    out.node = tp->record(
        [an, r, c](Tape<S>& t, const Tensor<S>& g) {
          Tensor<S> da({r, c});
          const S inv = S(1) / static_cast<S>(r);
          for (Index i = 0; i < r; ++i)
            for (Index j = 0; j < c; ++j) da[i * c + j] = g.array()[j] * inv;
          t.accumulate(an, da);
        },
        out.shape());
  }
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects a rank-2 tensor");
  const Index r = a.shape()[0], c = a.shape()[1];
  typename Tensor<S>::MatrixRM y = a.mat().transpose();
  Tensor<S> out({c, r}, Eigen::Map<const typename Tensor<S>::Array>(y.data(), y.size()));
  if (Tape<S>* tp = detail::result_tape(a)) {
    const int an = a.node;
    out.tape = tp;
    out.node = tp->record(
        [an, r, c](Tape<S>& t, const Tensor<S>& g) {
          using M = typename Tensor<S>::MatrixRM;
          M dg = Eigen::Map<const M>(g.array().data(), c, r).transpose();
          t.accumulate(an, Tensor<S>({r, c}, Eigen::Map<const typename Tensor<S>::Array>(
                                                 dg.data(), dg.size())));
        },
        out.shape());
  }
  return out;
}

// Same data, new shape (element count must match).
template <typename S>
Tensor<S> reshape(const Tensor<S>& a, std::vector<Index> shape) {
  if (detail::shape_size(shape) != a.size())
    throw ShapeError("reshape to " + detail::shape_str(shape) + " from " +
                     detail::shape_str(a.shape()));
  Tensor<S> out(shape, a.array());
  if (Tape<S>* tp = detail::result_tape(a)) {
    const int an = a.node;
    out.tape = tp;
    out.node = tp->record(
        [an, old_shape = a.shape()](Tape<S>& t, const Tensor<S>& g) {
          t.accumulate(an, Tensor<S>(old_shape, g.array()));
        },
        out.shape());
  }
  return out;
}

// Row gather: [r,c] selected by `idx` -> [k,c]. Duplicate indices are
// allowed; gradients scatter-add.
template <typename S>
Tensor<S> index_select_rows(const Tensor<S>& a, const std::vector<Index>& idx) {
  if (a.rank() != 2) throw ShapeError("index_select_rows expects a rank-2 tensor");
  const Index r = a.shape()[0], c = a.shape()[1];
  const Index k = static_cast<Index>(idx.size());
  for (Index i : idx)
    if (i < 0 || i >= r) throw InvalidArgumentError("row index out of range");
  Tensor<S> out({k, c});
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < c; ++j) out[i * c + j] = a[idx[static_cast<std::size_t>(i)] * c + j];
  if (Tape<S>* tp = detail::result_tape(a)) {
    const int an = a.node;
    out.tape = tp;
    out.node = tp->record(
        [an, idx, r, c, k](Tape<S>& t, const Tensor<S>& g) {
          Tensor<S> da({r, c});
          for (Index i = 0; i < k; ++i)
            for (Index j = 0; j < c; ++j)
              da[idx[static_cast<std::size_t>(i)] * c + j] += g.array()[i * c + j];
          t.accumulate(an, da);
        },
        out.shape());
  }
  return out;
}

// Single row of a matrix as a rank-1 tensor.
template <typename S>
Tensor<S> row(const Tensor<S>& a, Index i) {
  Tensor<S> r = index_select_rows(a, std::vector<Index>{i});
  return reshape(r, {a.shape()[1]});
}

// Scalar element of a rank-1 tensor.
template <typename S>
Tensor<S> pick(const Tensor<S>& v, Index i) {
  if (v.rank() != 1) throw ShapeError("pick expects a rank-1 tensor");
  const Index n = v.shape()[0];
  if (i < 0 || i >= n) throw InvalidArgumentError("pick index out of range");
  Tensor<S> out = Tensor<S>::scalar(v[i]);
  if (Tape<S>* tp = detail::result_tape(v)) {
    const int vn = v.node;
    out.tape = tp;
    out.node = tp->record(
        [vn, i, n](Tape<S>& t, const Tensor<S>& g) {
          Tensor<S> dv({n});
          dv[i] = g.array()[0];
          t.accumulate(vn, dv);
        },
        out.shape());
  }
  return out;
}

// Concatenation of rank-1 tensors.
template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw InvalidArgumentError("concat of zero tensors");
  Index total = 0;
  Tape<S>* tp = nullptr;
  for (const auto& p : parts) {
    if (p.rank() != 1) throw ShapeError("concat expects rank-1 tensors");
    total += p.size();
    if (p.tape) {
      if (tp && tp != p.tape) throw InvalidArgumentError("operands live on different tapes");
      tp = p.tape;
    }
  }
  Tensor<S> out({total});
  Index off = 0;
  for (const auto& p : parts) {
    out.array().segment(off, p.size()) = p.array();
    off += p.size();
  }
  if (tp) {
    std::vector<int> nodes;
    std::vector<Index> sizes;
    for (const auto& p : parts) {
      nodes.push_back(p.node);
      sizes.push_back(p.size());
    }
    out.tape = tp;
    out.node = tp->record(
        [nodes, sizes](Tape<S>& t, const Tensor<S>& g) {
          Index off2 = 0;
          for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (nodes[i] >= 0) {
              Tensor<S> dp({sizes[i]});
              dp.array() = g.array().segment(off2, sizes[i]);
              t.accumulate(nodes[i], dp);
            }
            off2 += sizes[i];
          }
        },
        out.shape());
  }
  return out;
}

// Probability vector over the true entries of `mask`; masked-out entries
// are exactly zero. Computed with max-subtraction. Throws if no entry of
// the mask is true.
template <typename S>
Tensor<S> masked_softmax(const Tensor<S>& logits, const std::vector<std::uint8_t>& mask) {
  if (logits.rank() != 1) throw ShapeError("masked_softmax expects a rank-1 tensor");
  const Index n = logits.shape()[0];
  if (static_cast<Index>(mask.size()) != n)
    throw ShapeError("mask length does not match logits length");

  S mx = std::numeric_limits<S>::lowest();
  bool any = false;
  for (Index i = 0; i < n; ++i)
    if (mask[static_cast<std::size_t>(i)]) {
      any = true;
      mx = std::max(mx, logits[i]);
    }
  if (!any) throw InfeasibleError("masked_softmax: mask has no feasible entry");

  Tensor<S> out({n});
  S z = S(0);
  for (Index i = 0; i < n; ++i) {
    if (mask[static_cast<std::size_t>(i)]) {
      out[i] = std::exp(logits[i] - mx);
      z += out[i];
    }
  }
  for (Index i = 0; i < n; ++i)
    if (mask[static_cast<std::size_t>(i)]) out[i] /= z;

  if (Tape<S>* tp = detail::result_tape(logits)) {
    const int ln = logits.node;
    out.tape = tp;
    out.node = tp->record(
        [ln, y = out.detached(), mask, n](Tape<S>& t, const Tensor<S>& g) {
          S dot = S(0);
          for (Index i = 0; i < n; ++i)
            if (mask[static_cast<std::size_t>(i)]) dot += g.array()[i] * y.array()[i];
          Tensor<S> dl({n});
          for (Index i = 0; i < n; ++i)
            if (mask[static_cast<std::size_t>(i)]) dl[i] = y.array()[i] * (g.array()[i] - dot);
          t.accumulate(ln, dl);
        },
        out.shape());
  }
  return out;
}

// Row-wise full softmax of a matrix, max-subtracted per row.
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
  if (a.rank() != 2) throw ShapeError("softmax_rows expects a rank-2 tensor");
  const Index r = a.shape()[0], c = a.shape()[1];
  Tensor<S> out({r, c});
  for (Index i = 0; i < r; ++i) {
    S mx = a[i * c];
    for (Index j = 1; j < c; ++j) mx = std::max(mx, a[i * c + j]);
    S z = S(0);
    for (Index j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(a[i * c + j] - mx);
      z += out[i * c + j];
    }
    for (Index j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  if (Tape<S>* tp = detail::result_tape(a)) {
    const int an = a.node;
    out.tape = tp;
    out.node = tp->record(
        [an, y = out.detached(), r, c](Tape<S>& t, const Tensor<S>& g) {
          Tensor<S> da({r, c});
          for (Index i = 0; i < r; ++i) {
            S dot = S(0);
            for (Index j = 0; j < c; ++j) dot += g.array()[i * c + j] * y.array()[i * c + j];
            for (Index j = 0; j < c; ++j)
              da[i * c + j] = y.array()[i * c + j] * (g.array()[i * c + j] - dot);
          }
          t.accumulate(an, da);
        },
        out.shape());
  }
  return out;
}

// Index of the largest entry; ties resolved to the lowest index.
template <typename S>
Index argmax(const Tensor<S>& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename S>
struct AdamStateT {
  std::vector<typename Tensor<S>::Array> m;
  std::vector<typename Tensor<S>::Array> v;
  long t = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update over an ordered parameter list. Moment
// slots are allocated on first use and must keep their shapes afterwards.
// Parameters are detached from any tape after the step.
template <typename S>
void adam_step(const std::vector<Tensor<S>*>& params, const std::vector<Tensor<S>>& grads,
               AdamStateT<S>& state, const AdamConfig& cfg = {}) {
  if (params.size() != grads.size())
    throw ShapeError("adam_step: params/grads count mismatch");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i] = Tensor<S>::Array::Zero(params[i]->size());
      state.v[i] = Tensor<S>::Array::Zero(params[i]->size());
    }
  }
  if (state.m.size() != params.size())
    throw ShapeError("adam_step: state tracks a different parameter count");
  state.t += 1;
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S bc1 = S(1) - std::pow(b1, static_cast<S>(state.t));
  const S bc2 = S(1) - std::pow(b2, static_cast<S>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<S>& p = *params[i];
    const Tensor<S>& g = grads[i];
    if (!p.same_shape(g)) throw ShapeError("adam_step: gradient shape mismatch");
    if (state.m[i].size() != p.size()) throw ShapeError("adam_step: moment shape mismatch");
    state.m[i] = b1 * state.m[i] + (S(1) - b1) * g.array();
    state.v[i] = b2 * state.v[i] + (S(1) - b2) * g.array().square();
    p.array() -= static_cast<S>(cfg.lr) *
                 (state.m[i] / bc1) / ((state.v[i] / bc2).sqrt() + static_cast<S>(cfg.eps));
    p.tape = nullptr;
    p.node = -1;
  }
}

using TensorD = Tensor<double>;
using TapeD = Tape<double>;
using AdamState = AdamStateT<double>;

}  // namespace ztop
