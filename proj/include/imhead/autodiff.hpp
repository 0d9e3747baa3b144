#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A node is either "plain" (rows are independent samples) or a "jet": a jet
// with n samples has 4n rows laid out as [value; d/dx0; d/dx1; d/dx2], so a
// forward pass over jets carries the spatial gradient of every intermediate
// quantity. Because the tangent rows are ordinary tape values, losses that
// involve the spatial gradient (normal alignment, Eikonal) can themselves be
// differentiated with respect to parameters and latents.

#include <Eigen/Dense>

#include <cassert>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__SSE__) || defined(_M_X64)
#include <xmmintrin.h>
#endif

namespace imhead::ad {

/// Flushes subnormal floats to zero for its lifetime. Subnormal intermediates
/// otherwise slow matrix products by an order of magnitude.
class DenormalGuard {
 public:
  DenormalGuard() {
#if defined(__SSE__) || defined(_M_X64)
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040u);
#endif
  }
  ~DenormalGuard() {
#if defined(__SSE__) || defined(_M_X64)
    _mm_setcsr(saved_);
#endif
  }
  DenormalGuard(const DenormalGuard&) = delete;
  DenormalGuard& operator=(const DenormalGuard&) = delete;

 private:
  unsigned int saved_ = 0;
};

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kJetBlocks = 4;

template <typename S>
class Tape;

/// Handle to a tape node. Cheap to copy; only valid while its tape lives.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  [[nodiscard]] bool valid() const { return tape != nullptr && id >= 0; }
  [[nodiscard]] const Mat<S>& value() const;
  [[nodiscard]] const Mat<S>& grad() const;
  [[nodiscard]] bool jet() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  /// Number of samples: rows for plain nodes, rows/4 for jets.
  [[nodiscard]] Eigen::Index samples() const { return jet() ? rows() / kJetBlocks : rows(); }
};

template <typename S>
class Tape {
 public:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    bool jet = false;
    bool requires_grad = false;
    std::function<void(Tape&)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> constant(Mat<S> value, bool jet = false) { return push(std::move(value), jet, false); }
  /// Leaf whose gradient is accumulated by backward().
  Var<S> leaf(Mat<S> value) { return push(std::move(value), false, true); }

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  Var<S> push(Mat<S> value, bool jet, bool requires_grad) {
    if (jet && value.rows() % kJetBlocks != 0) {
      throw std::logic_error("jet node rows must be a multiple of 4");
    }
    nodes_.push_back(Node{std::move(value), Mat<S>(), jet, requires_grad, {}});
    return Var<S>{this, static_cast<int>(nodes_.size() - 1)};
  }

  /// Adds `g` into the gradient slot of `id`, allocating on first use.
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = node(id);
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  template <typename Derived>
  void accumulate_rows(int id, Eigen::Index row0, const Eigen::MatrixBase<Derived>& g) {
    Node& n = node(id);
    if (!n.requires_grad) return;
    ensure_grad(n);
    n.grad.middleRows(row0, g.rows()) += g;
  }

  void ensure_grad(Node& n) {
    if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
  }

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and runs the reverse sweep.
  void backward(Var<S> root) {
    Node& r = node(root.id);
    if (r.value.size() != 1) throw std::logic_error("backward() requires a scalar root");
    if (!r.requires_grad) return;
    r.grad = Mat<S>::Ones(1, 1);
    for (int id = root.id; id >= 0; --id) {
      Node& n = node(id);
      if (n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this);
    }
  }

 private:
  // deque keeps node references stable while ops append.
  std::deque<Node> nodes_;
};

template <typename S>
const Mat<S>& Var<S>::value() const {
  return tape->node(id).value;
}
template <typename S>
const Mat<S>& Var<S>::grad() const {
  return tape->node(id).grad;
}
template <typename S>
bool Var<S>::jet() const {
  return tape->node(id).jet;
}

namespace detail {

template <typename S>
Var<S> make(Tape<S>& t, Mat<S> value, bool jet, std::initializer_list<Var<S>> parents,
            std::function<void(Tape<S>&, int)> bw) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || t.node(p.id).requires_grad;
  Var<S> out = t.push(std::move(value), jet, rg);
  if (rg) {
    const int self = out.id;
    t.node(self).backward = [bw = std::move(bw), self](Tape<S>& tape) { bw(tape, self); };
  }
  return out;
}

inline void check(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Construction helpers

/// Jet of n query points: value rows are the points, tangent block k is e_k.
template <typename S>
Var<S> jet_points(Tape<S>& t, const Mat<S>& points) {
  detail::check(points.cols() == 3, "jet_points expects n x 3");
  const Eigen::Index n = points.rows();
  Mat<S> v = Mat<S>::Zero(kJetBlocks * n, 3);
  v.topRows(n) = points;
  for (int k = 0; k < 3; ++k) v.block((k + 1) * n, k, n, 1).setOnes();
  return t.constant(std::move(v), true);
}

/// Plain -> jet with zero tangents (a quantity that does not depend on x).
template <typename S>
Var<S> lift(Var<S> a) {
  Tape<S>& t = *a.tape;
  detail::check(!a.jet(), "lift expects a plain node");
  const Eigen::Index n = a.rows();
  Mat<S> v = Mat<S>::Zero(kJetBlocks * n, a.cols());
  v.topRows(n) = a.value();
  return detail::make<S>(t, std::move(v), true, {a}, [a, n](Tape<S>& tp, int self) {
    tp.accumulate(a.id, tp.node(self).grad.topRows(n));
  });
}

/// Row gather: out[i] = table[index[i]]. Optionally lifted to a jet.
template <typename S>
Var<S> gather_rows(Var<S> table, std::span<const int> index, bool as_jet = false) {
  Tape<S>& t = *table.tape;
  detail::check(!table.jet(), "gather_rows expects a plain table");
  const Eigen::Index n = static_cast<Eigen::Index>(index.size());
  const Eigen::Index c = table.cols();
  const Eigen::Index rows = as_jet ? kJetBlocks * n : n;
  Mat<S> v = Mat<S>::Zero(rows, c);
  const Mat<S>& tv = table.value();
  for (Eigen::Index i = 0; i < n; ++i) {
    const int r = index[static_cast<std::size_t>(i)];
    detail::check(r >= 0 && r < tv.rows(), "gather_rows index out of range");
    v.row(i) = tv.row(r);
  }
  std::vector<int> idx(index.begin(), index.end());
  return detail::make<S>(t, std::move(v), as_jet, {table},
                         [table, idx = std::move(idx)](Tape<S>& tp, int self) {
                           auto& tn = tp.node(table.id);
                           if (!tn.requires_grad) return;
                           tp.ensure_grad(tn);
                           const Mat<S>& g = tp.node(self).grad;
                           for (std::size_t i = 0; i < idx.size(); ++i) {
                             tn.grad.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                           }
                         });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// y = x W^T + b. The bias touches only value rows of a jet.
template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
  Tape<S>& t = *x.tape;
  detail::check(x.cols() == w.cols(), "linear: input width mismatch");
  const bool jet = x.jet();
  const Eigen::Index n = x.samples();
  Mat<S> v(x.rows(), w.rows());
  v.noalias() = x.value() * w.value().transpose();
  if (b.valid()) {
    detail::check(b.rows() == 1 && b.cols() == w.rows(), "linear: bias shape");
    v.topRows(n).rowwise() += b.value().row(0);
  }
  return detail::make<S>(t, std::move(v), jet, {x, w, b.valid() ? b : w},
                         [x, w, b, n](Tape<S>& tp, int self) {
                           const Mat<S>& g = tp.node(self).grad;
                           if (tp.node(x.id).requires_grad) {
                             Mat<S> gx(g.rows(), w.cols());
                             gx.noalias() = g * w.value();
                             tp.accumulate(x.id, gx);
                           }
                           if (tp.node(w.id).requires_grad) {
                             Mat<S> gw(w.rows(), w.cols());
                             gw.noalias() = g.transpose() * x.value();
                             tp.accumulate(w.id, gw);
                           }
                           if (b.valid() && tp.node(b.id).requires_grad) {
                             tp.accumulate(b.id, g.topRows(n).colwise().sum());
                           }
                         });
}

template <typename S>
Var<S> linear(Var<S> x, Var<S> w) {
  return linear(x, w, Var<S>{});
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  detail::check(a.jet() == b.jet(), "add: jet mismatch");
  return detail::make<S>(*a.tape, a.value() + b.value(), a.jet(), {a, b},
                         [a, b](Tape<S>& tp, int self) {
                           const Mat<S>& g = tp.node(self).grad;
                           tp.accumulate(a.id, g);
                           tp.accumulate(b.id, g);
                         });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  detail::check(a.jet() == b.jet(), "sub: jet mismatch");
  return detail::make<S>(*a.tape, a.value() - b.value(), a.jet(), {a, b},
                         [a, b](Tape<S>& tp, int self) {
                           const Mat<S>& g = tp.node(self).grad;
                           tp.accumulate(a.id, g);
                           tp.accumulate(b.id, -g);
                         });
}

/// Elementwise product; on jets applies the product rule to tangent rows.
template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  detail::check(a.jet() == b.jet(), "mul: jet mismatch");
  const Mat<S>& av = a.value();
  const Mat<S>& bv = b.value();
  if (!a.jet()) {
    return detail::make<S>(*a.tape, av.cwiseProduct(bv), false, {a, b},
                           [a, b](Tape<S>& tp, int self) {
                             const Mat<S>& g = tp.node(self).grad;
                             if (tp.node(a.id).requires_grad) tp.accumulate(a.id, g.cwiseProduct(b.value()));
                             if (tp.node(b.id).requires_grad) tp.accumulate(b.id, g.cwiseProduct(a.value()));
                           });
  }
  const Eigen::Index n = a.samples();
  Mat<S> v(av.rows(), av.cols());
  v.topRows(n) = av.topRows(n).cwiseProduct(bv.topRows(n));
  for (int k = 1; k < kJetBlocks; ++k) {
    v.middleRows(k * n, n) = av.middleRows(k * n, n).cwiseProduct(bv.topRows(n)) +
                             av.topRows(n).cwiseProduct(bv.middleRows(k * n, n));
  }
  return detail::make<S>(*a.tape, std::move(v), true, {a, b}, [a, b, n](Tape<S>& tp, int self) {
    const Mat<S>& g = tp.node(self).grad;
    const Mat<S>& av = a.value();
    const Mat<S>& bv = b.value();
    auto grad_for = [&](const Mat<S>& other) {
      Mat<S> out(g.rows(), g.cols());
      out.topRows(n) = g.topRows(n).cwiseProduct(other.topRows(n));
      for (int k = 1; k < kJetBlocks; ++k) {
        out.topRows(n) += g.middleRows(k * n, n).cwiseProduct(other.middleRows(k * n, n));
        out.middleRows(k * n, n) = g.middleRows(k * n, n).cwiseProduct(other.topRows(n));
      }
      return out;
    };
    if (tp.node(a.id).requires_grad) tp.accumulate(a.id, grad_for(bv));
    if (tp.node(b.id).requires_grad) tp.accumulate(b.id, grad_for(av));
  });
}

template <typename S>
Var<S> scale(Var<S> a, S s) {
  return detail::make<S>(*a.tape, a.value() * s, a.jet(), {a}, [a, s](Tape<S>& tp, int self) {
    tp.accumulate(a.id, tp.node(self).grad * s);
  });
}

/// Multiplies column c by factors[c].
template <typename S>
Var<S> scale_cols(Var<S> a, const Eigen::Matrix<S, 1, Eigen::Dynamic>& factors) {
  detail::check(factors.size() == a.cols(), "scale_cols: width mismatch");
  Mat<S> v = a.value().array().rowwise() * factors.array();
  return detail::make<S>(*a.tape, std::move(v), a.jet(), {a}, [a, factors](Tape<S>& tp, int self) {
    Mat<S> g = tp.node(self).grad.array().rowwise() * factors.array();
    tp.accumulate(a.id, g);
  });
}

/// Adds a constant to value rows only.
template <typename S>
Var<S> add_scalar(Var<S> a, S c) {
  Mat<S> v = a.value();
  v.topRows(a.samples()).array() += c;
  return detail::make<S>(*a.tape, std::move(v), a.jet(), {a}, [a](Tape<S>& tp, int self) {
    tp.accumulate(a.id, tp.node(self).grad);
  });
}

/// Pointwise map with precomputed value rows f(a), first derivative f'(a), and
/// a callback producing f''(a) (needed only to back-propagate through jets).
/// On jets: value f(a), tangent f'(a) * da.
template <typename S>
Var<S> pointwise(Var<S> a, Mat<S> f, Mat<S> fp, std::function<Mat<S>()> fpp) {
  const Mat<S>& av = a.value();
  const Eigen::Index n = a.samples();
  const bool jet = a.jet();
  Mat<S> v(av.rows(), av.cols());
  v.topRows(n) = std::move(f);
  if (jet) {
    for (int k = 1; k < kJetBlocks; ++k) v.middleRows(k * n, n).array() = fp.array() * av.middleRows(k * n, n).array();
  }
  return detail::make<S>(*a.tape, std::move(v), jet, {a},
                         [a, n, jet, fp = std::move(fp), fpp = std::move(fpp)](Tape<S>& tp, int self) {
                           const Mat<S>& g = tp.node(self).grad;
                           Mat<S> ga(g.rows(), g.cols());
                           ga.topRows(n).array() = g.topRows(n).array() * fp.array();
                           if (jet) {
                             const Mat<S>& av = a.value();
                             const Mat<S> second = fpp();
                             for (int k = 1; k < kJetBlocks; ++k) {
                               ga.topRows(n).array() +=
                                   g.middleRows(k * n, n).array() * av.middleRows(k * n, n).array() * second.array();
                               ga.middleRows(k * n, n).array() = g.middleRows(k * n, n).array() * fp.array();
                             }
                           }
                           tp.accumulate(a.id, ga);
                         });
}

/// Generic smooth unary map from scalar functors f, f', f''.
template <typename S, typename F, typename D1, typename D2>
Var<S> unary(Var<S> a, F f, D1 d1, D2 d2) {
  const Eigen::Index n = a.samples();
  auto top = a.value().topRows(n);
  return pointwise<S>(a, top.unaryExpr(f), top.unaryExpr(d1), [a, n, d2]() -> Mat<S> {
    return a.value().topRows(n).unaryExpr(d2);
  });
}

namespace detail {
template <typename S>
auto top(Var<S> a) {
  return a.value().topRows(a.samples()).array();
}
}  // namespace detail

/// softplus_beta(a) = log(1 + exp(beta a)) / beta.
template <typename S>
Var<S> softplus(Var<S> a, S beta) {
  const auto z = (detail::top(a) * beta).eval();
  const auto e = (-z.abs()).exp().eval();
  Mat<S> f = ((z.max(S(0)) + e.log1p()) / beta).matrix();
  if (!a.jet() && !a.tape->node(a.id).requires_grad) return a.tape->constant(std::move(f));
  const auto inv = (S(1) + e).inverse().eval();
  Mat<S> sig = (z >= S(0)).select(inv, e * inv).matrix();
  Mat<S> fpp = (sig.array() * (S(1) - sig.array()) * beta).matrix();
  return pointwise<S>(a, std::move(f), std::move(sig), [fpp = std::move(fpp)]() { return fpp; });
}

template <typename S>
Var<S> sin(Var<S> a) {
  Mat<S> s = detail::top(a).sin().matrix();
  Mat<S> c = detail::top(a).cos().matrix();
  Mat<S> ns = -s;
  return pointwise<S>(a, std::move(s), std::move(c), [ns = std::move(ns)]() { return ns; });
}

template <typename S>
Var<S> cos(Var<S> a) {
  Mat<S> c = detail::top(a).cos().matrix();
  Mat<S> ns = -detail::top(a).sin().matrix();
  Mat<S> nc = -c;
  return pointwise<S>(a, std::move(c), std::move(ns), [nc = std::move(nc)]() { return nc; });
}

template <typename S>
Var<S> exp(Var<S> a) {
  Mat<S> e = detail::top(a).exp().matrix();
  Mat<S> d = e;
  return pointwise<S>(a, std::move(e), std::move(d), [d]() { return d; });
}

template <typename S>
Var<S> sqrt(Var<S> a) {
  Mat<S> r = detail::top(a).sqrt().matrix();
  Mat<S> d = (S(0.5) / r.array()).matrix();
  return pointwise<S>(a, Mat<S>(r), Mat<S>(d), [r, d]() -> Mat<S> { return (S(-0.5) * d.array() / r.array()).matrix(); });
}

template <typename S>
Var<S> square(Var<S> a) {
  Mat<S> f = detail::top(a).square().matrix();
  Mat<S> d = (S(2) * detail::top(a)).matrix();
  const Eigen::Index r = f.rows(), c = f.cols();
  return pointwise<S>(a, std::move(f), std::move(d), [r, c]() -> Mat<S> { return Mat<S>::Constant(r, c, S(2)); });
}

template <typename S>
Var<S> reciprocal(Var<S> a) {
  Mat<S> f = detail::top(a).inverse().matrix();
  Mat<S> d = (-f.array().square()).matrix();
  return pointwise<S>(a, Mat<S>(f), std::move(d), [f]() -> Mat<S> { return (S(2) * f.array().cube()).matrix(); });
}

/// |a|; subgradient 0 at the origin.
template <typename S>
Var<S> abs(Var<S> a) {
  Mat<S> f = detail::top(a).abs().matrix();
  Mat<S> d = detail::top(a).sign().matrix();
  const Eigen::Index r = f.rows(), c = f.cols();
  return pointwise<S>(a, std::move(f), std::move(d), [r, c]() -> Mat<S> { return Mat<S>::Zero(r, c); });
}

// ---------------------------------------------------------------------------
// Structural

template <typename S>
Var<S> hcat(std::span<const Var<S>> parts) {
  detail::check(!parts.empty(), "hcat: no inputs");
  const Eigen::Index rows = parts[0].rows();
  const bool jet = parts[0].jet();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    detail::check(p.rows() == rows && p.jet() == jet, "hcat: row/jet mismatch");
    cols += p.cols();
  }
  Mat<S> v(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    v.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  Tape<S>& t = *parts[0].tape;
  bool rg = false;
  for (const auto& p : parts) rg = rg || t.node(p.id).requires_grad;
  Var<S> out = t.push(std::move(v), jet, rg);
  if (rg) {
    std::vector<Var<S>> ps(parts.begin(), parts.end());
    const int self = out.id;
    t.node(self).backward = [ps = std::move(ps), self](Tape<S>& tp) {
      const Mat<S>& g = tp.node(self).grad;
      Eigen::Index c = 0;
      for (const auto& p : ps) {
        if (tp.node(p.id).requires_grad) tp.accumulate(p.id, g.middleCols(c, p.cols()));
        c += p.cols();
      }
    };
  }
  return out;
}

template <typename S>
Var<S> hcat(std::initializer_list<Var<S>> parts) {
  std::vector<Var<S>> v(parts);
  return hcat<S>(std::span<const Var<S>>(v));
}

template <typename S>
Var<S> cols(Var<S> a, Eigen::Index start, Eigen::Index count) {
  detail::check(start >= 0 && start + count <= a.cols(), "cols: range");
  const Eigen::Index total = a.cols();
  return detail::make<S>(*a.tape, a.value().middleCols(start, count), a.jet(), {a},
                         [a, start, count, total](Tape<S>& tp, int self) {
                           auto& an = tp.node(a.id);
                           tp.ensure_grad(an);
                           an.grad.middleCols(start, count) += tp.node(self).grad;
                           (void)total;
                         });
}

/// Samples [start, start + count); for a jet the same range of every block.
template <typename S>
Var<S> rows(Var<S> a, Eigen::Index start, Eigen::Index count) {
  const Eigen::Index n = a.samples();
  detail::check(start >= 0 && count >= 0 && start + count <= n, "rows: range");
  const int blocks = a.jet() ? kJetBlocks : 1;
  Mat<S> v(blocks * count, a.cols());
  for (int b = 0; b < blocks; ++b) v.middleRows(b * count, count) = a.value().middleRows(b * n + start, count);
  return detail::make<S>(*a.tape, std::move(v), a.jet(), {a}, [a, n, start, count, blocks](Tape<S>& tp, int self) {
    const Mat<S>& g = tp.node(self).grad;
    for (int b = 0; b < blocks; ++b) tp.accumulate_rows(a.id, b * n + start, g.middleRows(b * count, count));
  });
}

/// Sum across columns: r x c -> r x 1.
template <typename S>
Var<S> row_sum(Var<S> a) {
  const Eigen::Index c = a.cols();
  return detail::make<S>(*a.tape, a.value().rowwise().sum(), a.jet(), {a},
                         [a, c](Tape<S>& tp, int self) {
                           const Mat<S>& g = tp.node(self).grad;
                           tp.accumulate(a.id, g.replicate(1, c));
                         });
}

/// r x 1 -> r x c by repeating the column.
template <typename S>
Var<S> broadcast_cols(Var<S> a, Eigen::Index c) {
  detail::check(a.cols() == 1, "broadcast_cols expects one column");
  return detail::make<S>(*a.tape, a.value().replicate(1, c), a.jet(), {a},
                         [a](Tape<S>& tp, int self) {
                           tp.accumulate(a.id, tp.node(self).grad.rowwise().sum());
                         });
}

/// Value rows of a jet as a plain node.
template <typename S>
Var<S> jet_value(Var<S> a) {
  detail::check(a.jet(), "jet_value expects a jet");
  const Eigen::Index n = a.samples();
  return detail::make<S>(*a.tape, a.value().topRows(n), false, {a}, [a](Tape<S>& tp, int self) {
    tp.accumulate_rows(a.id, 0, tp.node(self).grad);
  });
}

/// Tangent block k (d/dx_k) of a jet as a plain node.
template <typename S>
Var<S> jet_tangent(Var<S> a, int k) {
  detail::check(a.jet() && k >= 0 && k < 3, "jet_tangent: bad request");
  const Eigen::Index n = a.samples();
  return detail::make<S>(*a.tape, a.value().middleRows((k + 1) * n, n), false, {a},
                         [a, n, k](Tape<S>& tp, int self) {
                           tp.accumulate_rows(a.id, (k + 1) * n, tp.node(self).grad);
                         });
}

/// Spatial gradient of a single-column jet as a plain n x 3 node.
template <typename S>
Var<S> jet_gradient(Var<S> a) {
  detail::check(a.jet() && a.cols() == 1, "jet_gradient expects an n x 1 jet");
  return hcat<S>({jet_tangent(a, 0), jet_tangent(a, 1), jet_tangent(a, 2)});
}

/// Sum of every entry of a plain node -> 1 x 1.
template <typename S>
Var<S> sum(Var<S> a) {
  detail::check(!a.jet(), "sum expects a plain node");
  Mat<S> v(1, 1);
  v(0, 0) = a.value().sum();
  return detail::make<S>(*a.tape, std::move(v), false, {a}, [a](Tape<S>& tp, int self) {
    const S g = tp.node(self).grad(0, 0);
    tp.accumulate(a.id, Mat<S>::Constant(a.rows(), a.cols(), g));
  });
}

template <typename S>
Var<S> mean(Var<S> a) {
  const auto count = static_cast<S>(a.value().size());
  return scale(sum(a), S(1) / count);
}

/// Value without a backward edge.
template <typename S>
Var<S> detach(Var<S> a) {
  return a.tape->constant(a.value(), a.jet());
}

}  // namespace imhead::ad
