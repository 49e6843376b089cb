#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace xfactor {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + "]";
}

inline std::vector<int64_t> shape_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// Trailing-dimension broadcasting only: dims are right-aligned and must be
// equal or 1. Anything fancier is rejected.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    const int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

namespace detail {
inline bool& grad_enabled() {
  thread_local bool v = true;
  return v;
}
inline bool& check_finite_enabled() {
  thread_local bool v = false;
  return v;
}
inline uint64_t& seq_counter() {
  thread_local uint64_t v = 0;
  return v;
}
}  // namespace detail

struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_enabled()) { detail::grad_enabled() = false; }
  ~NoGradGuard() { detail::grad_enabled() = prev_; }
  bool prev_;
};

inline void set_check_finite(bool on) { detail::check_finite_enabled() = on; }

// Boolean mask used by attention ops; kept outside the autograd graph.
struct BoolMask {
  Shape shape;
  std::shared_ptr<std::vector<uint8_t>> data;

  BoolMask() = default;
  BoolMask(Shape s, std::vector<uint8_t> d)
      : shape(std::move(s)), data(std::make_shared<std::vector<uint8_t>>(std::move(d))) {
    if (static_cast<int64_t>(data->size()) != shape_numel(shape))
      throw std::invalid_argument("mask size does not match shape");
  }
  static BoolMask all_true(Shape s) {
    std::vector<uint8_t> d(static_cast<size_t>(shape_numel(s)), 1);
    return BoolMask(std::move(s), std::move(d));
  }
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad && detail::grad_enabled();
    node_->seq = ++detail::seq_counter();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> d(static_cast<size_t>(shape_numel(shape)), T(0));
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> d(static_cast<size_t>(shape_numel(shape)), value);
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }
  static Tensor scalar(T value) { return Tensor(Shape{}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->numel(); }
  int64_t dim(int i) const {
    const int r = rank();
    if (i < 0) i += r;
    return node_->shape[static_cast<size_t>(i)];
  }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  bool requires_grad() const { return node_->requires_grad; }
  std::vector<T>& data() { return node_->data; }
  const std::vector<T>& data() const { return node_->data; }
  std::vector<T>& grad() { return node_->grad; }
  const std::vector<T>& grad() const { return node_->grad; }
  std::shared_ptr<Node> node() const { return node_; }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor");
    return node_->data[0];
  }

  void zero_grad() { node_->grad.clear(); }

  Tensor detach() const {
    Tensor out(node_->shape, node_->data, false);
    return out;
  }

  void assert_finite(const std::string& what = "tensor") const {
    for (const T v : node_->data)
      if (!std::isfinite(static_cast<double>(v)))
        throw std::runtime_error("non-finite value in " + what);
  }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
std::shared_ptr<TensorNode<T>> make_result(Shape shape, std::vector<T> data,
                                           std::vector<std::shared_ptr<TensorNode<T>>> parents,
                                           std::function<void(TensorNode<T>&)> backward_fn) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->seq = ++seq_counter();
  if (grad_enabled()) {
    for (const auto& p : parents)
      if (p && p->requires_grad) {
        n->requires_grad = true;
        break;
      }
    if (n->requires_grad) {
      n->parents = std::move(parents);
      n->backward_fn = std::move(backward_fn);
    }
  }
  if (check_finite_enabled()) {
    for (const T v : n->data)
      if (!std::isfinite(static_cast<double>(v))) throw std::runtime_error("non-finite op result");
  }
  return n;
}

// Sums `g` (shaped like `from`) down to `to` under trailing broadcasting.
template <typename T>
void reduce_into(const std::vector<T>& g, const Shape& from, std::vector<T>& acc, const Shape& to) {
  if (from == to) {
    for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    return;
  }
  const size_t r = from.size();
  Shape to_pad(r, 1);
  for (size_t i = 0; i < to.size(); ++i) to_pad[r - to.size() + i] = to[i];
  const auto fs = shape_strides(from);
  auto ts = shape_strides(to_pad);
  for (size_t i = 0; i < r; ++i)
    if (to_pad[i] == 1) ts[i] = 0;
  const int64_t n = shape_numel(from);
  std::vector<int64_t> idx(r, 0);
  int64_t toff = 0;
  for (int64_t lin = 0; lin < n; ++lin) {
    acc[static_cast<size_t>(toff)] += g[static_cast<size_t>(lin)];
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      toff += ts[d];
      if (++idx[d] < from[d]) break;
      idx[d] = 0;
      toff -= ts[d] * from[d];
    }
  }
}

template <typename T>
void accumulate(TensorNode<T>& p, const std::vector<T>& g, const Shape& gshape) {
  p.ensure_grad();
  reduce_into(g, gshape, p.grad, p.shape);
}

// Iterates a broadcast binary op. FA/FB fetch offsets are precomputed strides.
template <typename T, typename F>
void broadcast_binary_loop(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
  const size_t r = out.size();
  Shape ap(r, 1), bp(r, 1);
  for (size_t i = 0; i < sa.size(); ++i) ap[r - sa.size() + i] = sa[i];
  for (size_t i = 0; i < sb.size(); ++i) bp[r - sb.size() + i] = sb[i];
  auto as = shape_strides(ap), bs = shape_strides(bp);
  for (size_t i = 0; i < r; ++i) {
    if (ap[i] == 1) as[i] = 0;
    if (bp[i] == 1) bs[i] = 0;
  }
  const int64_t n = shape_numel(out);
  std::vector<int64_t> idx(r, 0);
  int64_t ao = 0, bo = 0;
  for (int64_t lin = 0; lin < n; ++lin) {
    f(lin, ao, bo);
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      ao += as[d];
      bo += bs[d];
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
      ao -= as[d] * out[d];
      bo -= bs[d] * out[d];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops

enum class BinOp { Add, Sub, Mul, Div };

template <typename T>
Tensor<T> binary_op(BinOp op, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const int64_t n = shape_numel(out_shape);
  std::vector<T> out(static_cast<size_t>(n));
  const auto& ad = a.data();
  const auto& bd = b.data();

  if (op == BinOp::Div) {
    for (const T v : bd)
      if (v == T(0)) throw std::domain_error("division by tensor containing zero");
  }

  auto apply = [op](T x, T y) -> T {
    switch (op) {
      case BinOp::Add: return x + y;
      case BinOp::Sub: return x - y;
      case BinOp::Mul: return x * y;
      case BinOp::Div: return x / y;
    }
    return T(0);
  };

  if (a.shape() == b.shape()) {
    for (int64_t i = 0; i < n; ++i) out[i] = apply(ad[i], bd[i]);
  } else if (b.numel() == 1) {
    const T y = bd[0];
    for (int64_t i = 0; i < n; ++i) out[i] = apply(ad[i], y);
  } else if (a.numel() == 1) {
    const T x = ad[0];
    for (int64_t i = 0; i < n; ++i) out[i] = apply(x, bd[i]);
  } else {
    detail::broadcast_binary_loop<T>(out_shape, a.shape(), b.shape(),
                                     [&](int64_t o, int64_t ao, int64_t bo) {
                                       out[o] = apply(ad[ao], bd[bo]);
                                     });
  }

  auto an = a.node();
  auto bn = b.node();
  auto backward = [op, an, bn, out_shape](TensorNode<T>& self) {
    const auto& g = self.grad;
    const int64_t n = static_cast<int64_t>(g.size());
    auto scatter = [&](const std::shared_ptr<TensorNode<T>>& p, const std::vector<T>& pg) {
      if (p->requires_grad) detail::accumulate(*p, pg, out_shape);
    };
    switch (op) {
      case BinOp::Add: {
        if (an->requires_grad) detail::accumulate(*an, g, out_shape);
        if (bn->requires_grad) detail::accumulate(*bn, g, out_shape);
        break;
      }
      case BinOp::Sub: {
        if (an->requires_grad) detail::accumulate(*an, g, out_shape);
        if (bn->requires_grad) {
          std::vector<T> neg(g.size());
          for (int64_t i = 0; i < n; ++i) neg[i] = -g[i];
          detail::accumulate(*bn, neg, out_shape);
        }
        break;
      }
      case BinOp::Mul:
      case BinOp::Div: {
        std::vector<T> ga(an->requires_grad ? g.size() : 0);
        std::vector<T> gb(bn->requires_grad ? g.size() : 0);
        const auto& ad = an->data;
        const auto& bd = bn->data;
        detail::broadcast_binary_loop<T>(
            out_shape, an->shape, bn->shape, [&](int64_t o, int64_t ao, int64_t bo) {
              if (op == BinOp::Mul) {
                if (!ga.empty()) ga[o] = g[o] * bd[bo];
                if (!gb.empty()) gb[o] = g[o] * ad[ao];
              } else {
                if (!ga.empty()) ga[o] = g[o] / bd[bo];
                if (!gb.empty()) gb[o] = -g[o] * ad[ao] / (bd[bo] * bd[bo]);
              }
            });
        if (!ga.empty()) scatter(an, ga);
        if (!gb.empty()) scatter(bn, gb);
        break;
      }
    }
  };
  return Tensor<T>(detail::make_result<T>(out_shape, std::move(out), {an, bn}, backward));
}

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary_op(BinOp::Add, a, b); }
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary_op(BinOp::Sub, a, b); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary_op(BinOp::Mul, a, b); }
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return binary_op(BinOp::Div, a, b); }

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Elementwise unary ops

template <typename T, typename FwdF, typename BwdF>
Tensor<T> unary_op(const Tensor<T>& a, FwdF fwd, BwdF dfdx_from_xy) {
  const int64_t n = a.numel();
  std::vector<T> out(static_cast<size_t>(n));
  const auto& ad = a.data();
  for (int64_t i = 0; i < n; ++i) out[i] = fwd(ad[i]);
  auto an = a.node();
  auto outcopy = out;  // backward may need forward values
  auto backward = [an, dfdx_from_xy, outcopy](TensorNode<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const auto& g = self.grad;
    for (size_t i = 0; i < g.size(); ++i)
      an->grad[i] += g[i] * dfdx_from_xy(an->data[i], outcopy[i]);
  };
  return Tensor<T>(detail::make_result<T>(a.shape(), std::move(out), {an}, backward));
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  for (const T v : a.data())
    if (v <= T(0)) throw std::domain_error("log of non-positive value");
  return unary_op(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  for (const T v : a.data())
    if (v < T(0)) throw std::domain_error("sqrt of negative value");
  return unary_op(a, [](T x) { return std::sqrt(x); },
                  [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::abs(x); },
                  [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(a,
                  [](T x) {
                    return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                     : std::exp(x) / (T(1) + std::exp(x));
                  },
                  [](T, T y) { return y * (T(1) - y); });
}

// Exact erf form, not the tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return unary_op(a,
                  [](T x) {
                    return static_cast<T>(0.5 * static_cast<double>(x) *
                                          (1.0 + std::erf(static_cast<double>(x) * kInvSqrt2)));
                  },
                  [](T x, T) {
                    const double xd = static_cast<double>(x);
                    const double cdf = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
                    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xd * xd);
                    return static_cast<T>(cdf + xd * pdf);
                  });
}

template <typename T>
Tensor<T> acos(const Tensor<T>& a) {
  for (const T v : a.data())
    if (v < T(-1) || v > T(1)) throw std::domain_error("acos argument outside [-1,1]");
  return unary_op(a, [](T x) { return std::acos(x); },
                  [](T x, T) {
                    const double d = 1.0 - static_cast<double>(x) * static_cast<double>(x);
                    return static_cast<T>(-1.0 / std::sqrt(std::max(d, 1e-12)));
                  });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return unary_op(a, [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
                  [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  return unary_op(a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return unary_op(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T> Tensor<T> operator*(const Tensor<T>& a, T c) { return mul_scalar(a, c); }
template <typename T> Tensor<T> operator*(T c, const Tensor<T>& a) { return mul_scalar(a, c); }

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  // one -1 dim is inferred
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      if (infer >= 0) throw std::invalid_argument("reshape: multiple -1 dims");
      infer = static_cast<int>(i);
    } else {
      known *= new_shape[i];
    }
  }
  if (infer >= 0) new_shape[infer] = a.numel() / known;
  if (shape_numel(new_shape) != a.numel())
    throw std::invalid_argument("reshape numel mismatch " + shape_str(a.shape()) + " -> " +
                                shape_str(new_shape));
  auto an = a.node();
  auto backward = [an](TensorNode<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  };
  return Tensor<T>(detail::make_result<T>(std::move(new_shape), a.data(), {an}, backward));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, std::vector<int> perm) {
  const int r = a.rank();
  if (static_cast<int>(perm.size()) != r) throw std::invalid_argument("transpose: bad perm");
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = a.shape()[perm[i]];
  const auto in_strides = shape_strides(a.shape());
  std::vector<int64_t> gather(r);
  for (int i = 0; i < r; ++i) gather[i] = in_strides[perm[i]];
  const int64_t n = a.numel();
  std::vector<T> out(static_cast<size_t>(n));
  std::vector<int64_t> src_offsets(static_cast<size_t>(n));
  {
    std::vector<int64_t> idx(r, 0);
    int64_t off = 0;
    const auto& ad = a.data();
    for (int64_t lin = 0; lin < n; ++lin) {
      out[lin] = ad[off];
      src_offsets[lin] = off;
      for (int d = r - 1; d >= 0; --d) {
        off += gather[d];
        if (++idx[d] < out_shape[d]) break;
        idx[d] = 0;
        off -= gather[d] * out_shape[d];
      }
    }
  }
  auto an = a.node();
  auto offs = std::make_shared<std::vector<int64_t>>(std::move(src_offsets));
  auto backward = [an, offs](TensorNode<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[(*offs)[i]] += self.grad[i];
  };
  return Tensor<T>(detail::make_result<T>(std::move(out_shape), std::move(out), {an}, backward));
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  std::vector<int> perm(a.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
  return transpose(a, perm);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int64_t start, int64_t len) {
  const int r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::invalid_argument("slice: bad axis");
  if (start < 0 || len <= 0 || start + len > a.shape()[axis])
    throw std::invalid_argument("slice out of range");
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  const auto st = shape_strides(a.shape());
  const int64_t outer = std::accumulate(a.shape().begin(), a.shape().begin() + axis, int64_t(1),
                                        std::multiplies<int64_t>());
  const int64_t inner = st[axis];
  const int64_t in_axis = a.shape()[axis];
  std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
  const auto& ad = a.data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(ad.begin() + o * in_axis * inner + start * inner,
              ad.begin() + o * in_axis * inner + (start + len) * inner,
              out.begin() + o * len * inner);
  auto an = a.node();
  auto backward = [an, outer, inner, in_axis, start, len](TensorNode<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < len * inner; ++j)
        an->grad[o * in_axis * inner + start * inner + j] += self.grad[o * len * inner + j];
  };
  return Tensor<T>(detail::make_result<T>(std::move(out_shape), std::move(out), {an}, backward));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& ts, int axis) {
  if (ts.empty()) throw std::invalid_argument("concat: empty input");
  const int r = ts[0].rank();
  if (axis < 0) axis += r;
  Shape out_shape = ts[0].shape();
  int64_t total_axis = 0;
  for (const auto& t : ts) {
    if (t.rank() != r) throw std::invalid_argument("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis && t.shape()[d] != out_shape[d])
        throw std::invalid_argument("concat: shape mismatch");
    total_axis += t.shape()[axis];
  }
  out_shape[axis] = total_axis;
  const int64_t outer = std::accumulate(out_shape.begin(), out_shape.begin() + axis, int64_t(1),
                                        std::multiplies<int64_t>());
  const int64_t inner = std::accumulate(out_shape.begin() + axis + 1, out_shape.end(), int64_t(1),
                                        std::multiplies<int64_t>());
  std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
  std::vector<int64_t> axis_sizes;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  int64_t pos = 0;
  for (const auto& t : ts) {
    const int64_t na = t.shape()[axis];
    const auto& td = t.data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(td.begin() + o * na * inner, td.begin() + (o + 1) * na * inner,
                out.begin() + o * total_axis * inner + pos * inner);
    pos += na;
    axis_sizes.push_back(na);
    parents.push_back(t.node());
  }
  auto parents_copy = parents;
  auto backward = [parents_copy, axis_sizes, outer, inner, total_axis](TensorNode<T>& self) {
    int64_t pos = 0;
    for (size_t k = 0; k < parents_copy.size(); ++k) {
      auto& p = *parents_copy[k];
      const int64_t na = axis_sizes[k];
      if (p.requires_grad) {
        p.ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t j = 0; j < na * inner; ++j)
            p.grad[o * na * inner + j] += self.grad[o * total_axis * inner + pos * inner + j];
      }
      pos += na;
    }
  };
  return Tensor<T>(detail::make_result<T>(std::move(out_shape), std::move(out), std::move(parents),
                                          backward));
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& target) {
  const Shape out_shape = broadcast_shape(a.shape(), target);
  if (out_shape != target)
    throw std::invalid_argument("broadcast_to: cannot broadcast " + shape_str(a.shape()) +
                                " to " + shape_str(target));
  std::vector<T> out(static_cast<size_t>(shape_numel(target)));
  const auto& ad = a.data();
  detail::broadcast_binary_loop<T>(target, a.shape(), Shape{},
                                   [&](int64_t o, int64_t ao, int64_t) { out[o] = ad[ao]; });
  auto an = a.node();
  auto backward = [an, target](TensorNode<T>& self) {
    if (an->requires_grad) detail::accumulate(*an, self.grad, target);
  };
  return Tensor<T>(detail::make_result<T>(target, std::move(out), {an}, backward));
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (const T v : a.data()) s += v;
  auto an = a.node();
  auto backward = [an](TensorNode<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T g = self.grad[0];
    for (auto& v : an->grad) v += g;
  };
  return Tensor<T>(detail::make_result<T>(Shape{}, {s}, {an}, backward));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, int axis, bool keepdim) {
  const int r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::invalid_argument("sum_axis: bad axis");
  const int64_t na = a.shape()[axis];
  const int64_t outer = std::accumulate(a.shape().begin(), a.shape().begin() + axis, int64_t(1),
                                        std::multiplies<int64_t>());
  const int64_t inner = std::accumulate(a.shape().begin() + axis + 1, a.shape().end(), int64_t(1),
                                        std::multiplies<int64_t>());
  Shape out_shape = a.shape();
  if (keepdim) out_shape[axis] = 1;
  else out_shape.erase(out_shape.begin() + axis);
  std::vector<T> out(static_cast<size_t>(outer * inner), T(0));
  const auto& ad = a.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < na; ++k)
      for (int64_t j = 0; j < inner; ++j)
        out[o * inner + j] += ad[(o * na + k) * inner + j];
  auto an = a.node();
  auto backward = [an, outer, inner, na](TensorNode<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t k = 0; k < na; ++k)
        for (int64_t j = 0; j < inner; ++j)
          an->grad[(o * na + k) * inner + j] += self.grad[o * inner + j];
  };
  return Tensor<T>(detail::make_result<T>(std::move(out_shape), std::move(out), {an}, backward));
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, int axis, bool keepdim) {
  const int ax = axis < 0 ? axis + a.rank() : axis;
  return mul_scalar(sum_axis(a, axis, keepdim), T(1) / static_cast<T>(a.shape()[ax]));
}

// Detached max along axis (used for softmax stabilization).
template <typename T>
Tensor<T> max_axis_detached(const Tensor<T>& a, int axis) {
  const int r = a.rank();
  int ax = axis < 0 ? axis + r : axis;
  const int64_t na = a.shape()[ax];
  const int64_t outer = std::accumulate(a.shape().begin(), a.shape().begin() + ax, int64_t(1),
                                        std::multiplies<int64_t>());
  const int64_t inner = std::accumulate(a.shape().begin() + ax + 1, a.shape().end(), int64_t(1),
                                        std::multiplies<int64_t>());
  Shape out_shape = a.shape();
  out_shape[ax] = 1;
  std::vector<T> out(static_cast<size_t>(outer * inner), -std::numeric_limits<T>::infinity());
  const auto& ad = a.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < na; ++k)
      for (int64_t j = 0; j < inner; ++j)
        out[o * inner + j] = std::max(out[o * inner + j], ad[(o * na + k) * inner + j]);
  NoGradGuard ng;
  return Tensor<T>(std::move(out_shape), std::move(out));
}

// ---------------------------------------------------------------------------
// Matrix multiplication (batched, trailing broadcast on batch dims)

namespace detail {

// C[m,n] (+)= A op B with optional transposes. Layouts are row-major.
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    T* c = C + i * n;
    const T* a = A + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const T av = a[p];
      if (av == T(0)) continue;
      const T* b = B + p * n;
      for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* a = A + i * k;
    T* c = C + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* b = B + j * k;
      T s = T(0);
      for (int64_t p = 0; p < k; ++p) s += a[p] * b[p];
      c[j] += s;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* a = A + i * k;
    const T* b = B + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T av = a[p];
      if (av == T(0)) continue;
      T* c = C + p * n;
      for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw std::invalid_argument("matmul requires rank >= 2");
  const int64_t m = a.dim(-2), ka = a.dim(-1);
  const int64_t kb = b.dim(-2), n = b.dim(-1);
  if (ka != kb)
    throw std::invalid_argument("matmul inner dimension mismatch: " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  Shape obatch = broadcast_shape(abatch, bbatch);
  Shape out_shape = obatch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  const int64_t nbatch = shape_numel(obatch);

  // batch offset maps under broadcasting
  std::vector<int64_t> aoff(static_cast<size_t>(nbatch)), boff(static_cast<size_t>(nbatch));
  {
    int64_t cnt = 0;
    detail::broadcast_binary_loop<T>(obatch, abatch, bbatch,
                                     [&](int64_t o, int64_t ao, int64_t bo) {
                                       aoff[o] = ao;
                                       boff[o] = bo;
                                       ++cnt;
                                     });
    if (nbatch == 1 && cnt == 0) { aoff[0] = 0; boff[0] = 0; }
  }

  std::vector<T> out(static_cast<size_t>(nbatch * m * n), T(0));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (int64_t bi = 0; bi < nbatch; ++bi)
    detail::gemm_nn(ad + aoff[bi] * m * ka, bd + boff[bi] * ka * n, out.data() + bi * m * n, m,
                    ka, n);

  auto an = a.node();
  auto bn = b.node();
  auto aoffp = std::make_shared<std::vector<int64_t>>(std::move(aoff));
  auto boffp = std::make_shared<std::vector<int64_t>>(std::move(boff));
  const int64_t k = ka;
  auto backward = [an, bn, aoffp, boffp, nbatch, m, n, k](TensorNode<T>& self) {
    const T* g = self.grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      for (int64_t bi = 0; bi < nbatch; ++bi)
        detail::gemm_nt(g + bi * m * n, bn->data.data() + (*boffp)[bi] * k * n,
                        an->grad.data() + (*aoffp)[bi] * m * k, m, n, k);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t bi = 0; bi < nbatch; ++bi)
        detail::gemm_tn(an->data.data() + (*aoffp)[bi] * m * k, g + bi * m * n,
                        bn->grad.data() + (*boffp)[bi] * k * n, m, k, n);
    }
  };
  return Tensor<T>(detail::make_result<T>(std::move(out_shape), std::move(out), {an, bn},
                                          backward));
}

// ---------------------------------------------------------------------------
// Mask fill, softmax, layernorm, attention

// Sets masked-out entries (mask == 0) to -inf; gradient flows only where
// the mask is set. Mask broadcasts against x with trailing alignment.
template <typename T>
Tensor<T> masked_fill_neg_inf(const Tensor<T>& x, const BoolMask& mask) {
  const Shape out_shape = broadcast_shape(x.shape(), mask.shape);
  if (out_shape != x.shape())
    throw std::invalid_argument("mask must broadcast to value shape");
  const int64_t n = x.numel();
  std::vector<T> out(static_cast<size_t>(n));
  const auto& xd = x.data();
  const auto& md = *mask.data;
  auto keep = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(n));
  detail::broadcast_binary_loop<T>(out_shape, x.shape(), mask.shape,
                                   [&](int64_t o, int64_t xo, int64_t mo) {
                                     const bool k = md[mo] != 0;
                                     (*keep)[o] = k;
                                     out[o] = k ? xd[xo] : -std::numeric_limits<T>::infinity();
                                   });
  auto xn = x.node();
  auto backward = [xn, keep](TensorNode<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if ((*keep)[i]) xn->grad[i] += self.grad[i];
  };
  return Tensor<T>(detail::make_result<T>(out_shape, std::move(out), {xn}, backward));
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int ax = axis < 0 ? axis + x.rank() : axis;
  if (ax < 0 || ax >= x.rank()) throw std::invalid_argument("softmax: bad axis");
  auto m = max_axis_detached(x, ax);
  auto e = exp(sub(x, m));
  auto s = sum_axis(e, ax, true);
  return div(e, s);
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const int64_t w = x.dim(-1);
  if (gain.numel() != w || bias.numel() != w)
    throw std::invalid_argument("layer_norm: gain/bias must match normalized axis length");
  auto mu = mean_axis(x, -1, true);
  auto xc = sub(x, mu);
  auto var = mean_axis(mul(xc, xc), -1, true);
  auto normed = div(xc, sqrt(add_scalar(var, eps)));
  return add(mul(normed, gain), bias);
}

// softmax(q k^T / sqrt(d) + log-mask) v. Mask entry true means the query
// token may attend to the key token; every query row needs >=1 true entry.
template <typename T>
Tensor<T> masked_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const BoolMask& mask) {
  if (q.rank() != 4 || k.rank() != 4 || v.rank() != 4)
    throw std::invalid_argument("masked_attention expects [b,h,t,d] tensors");
  const int64_t t = q.dim(-2), d = q.dim(-1);
  if (k.dim(-2) != v.dim(-2) || k.dim(-1) != d)
    throw std::invalid_argument("masked_attention shape mismatch");
  const int64_t tk = k.dim(-2);
  // Reject fully masked query rows before any arithmetic.
  {
    const auto& ms = mask.shape;
    if (ms.size() < 2 || ms[ms.size() - 2] != t || ms[ms.size() - 1] != tk)
      throw std::invalid_argument("attention mask must end in [t_q, t_k]");
    const auto& md = *mask.data;
    const int64_t mats = shape_numel(ms) / (t * tk);
    for (int64_t mi = 0; mi < mats; ++mi)
      for (int64_t i = 0; i < t; ++i) {
        bool any = false;
        for (int64_t j = 0; j < tk; ++j)
          if (md[(mi * t + i) * tk + j]) { any = true; break; }
        if (!any) throw std::invalid_argument("attention mask has a fully masked row");
      }
  }
  auto scores = mul_scalar(matmul(q, transpose_last2(k)), static_cast<T>(1.0 / std::sqrt(double(d))));
  auto w = softmax(masked_fill_neg_inf(scores, mask), -1);
  return matmul(w, v);
}

// ---------------------------------------------------------------------------
// 2-D separable blur with a constant kernel (SSIM windows, augment blur).
// Borders use truncated-kernel renormalization so means are preserved.

template <typename T>
Tensor<T> separable_blur2d(const Tensor<T>& x, const std::vector<double>& kernel) {
  if (x.rank() < 3) throw std::invalid_argument("separable_blur2d expects [..,H,W,C]");
  const int64_t C = x.dim(-1), W = x.dim(-2), H = x.dim(-3);
  const int64_t batch = x.numel() / (H * W * C);
  const int64_t r = static_cast<int64_t>(kernel.size()) / 2;
  if (kernel.size() % 2 == 0) throw std::invalid_argument("kernel must have odd length");

  auto norm_for = [&](int64_t len) {
    std::vector<T> norm(static_cast<size_t>(len));
    for (int64_t i = 0; i < len; ++i) {
      double s = 0;
      for (int64_t j = -r; j <= r; ++j)
        if (i + j >= 0 && i + j < len) s += kernel[static_cast<size_t>(j + r)];
      norm[i] = static_cast<T>(1.0 / s);
    }
    return norm;
  };
  auto normH = std::make_shared<std::vector<T>>(norm_for(H));
  auto normW = std::make_shared<std::vector<T>>(norm_for(W));
  auto kern = std::make_shared<std::vector<T>>();
  for (double kv : kernel) kern->push_back(static_cast<T>(kv));

  // pass along H (stride W*C), then along W (stride C); norm optionally applied
  auto run = [&](const std::vector<T>& in, bool normalize) {
    std::vector<T> tmp(in.size(), T(0));
    const int64_t planeC = W * C;
    for (int64_t b = 0; b < batch; ++b) {
      const T* src = in.data() + b * H * planeC;
      T* dst = tmp.data() + b * H * planeC;
      for (int64_t h = 0; h < H; ++h)
        for (int64_t j = -r; j <= r; ++j) {
          const int64_t hh = h + j;
          if (hh < 0 || hh >= H) continue;
          const T kv = (*kern)[static_cast<size_t>(j + r)];
          const T* s = src + hh * planeC;
          T* d = dst + h * planeC;
          for (int64_t q = 0; q < planeC; ++q) d[q] += kv * s[q];
        }
      if (normalize)
        for (int64_t h = 0; h < H; ++h) {
          T* d = dst + h * planeC;
          const T nv = (*normH)[h];
          for (int64_t q = 0; q < planeC; ++q) d[q] *= nv;
        }
    }
    std::vector<T> out(in.size(), T(0));
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t h = 0; h < H; ++h) {
        const T* src = tmp.data() + (b * H + h) * planeC;
        T* dst = out.data() + (b * H + h) * planeC;
        for (int64_t w = 0; w < W; ++w)
          for (int64_t j = -r; j <= r; ++j) {
            const int64_t ww = w + j;
            if (ww < 0 || ww >= W) continue;
            const T kv = (*kern)[static_cast<size_t>(j + r)];
            for (int64_t c = 0; c < C; ++c) dst[w * C + c] += kv * src[ww * C + c];
          }
        if (normalize)
          for (int64_t w = 0; w < W; ++w)
            for (int64_t c = 0; c < C; ++c) dst[w * C + c] *= (*normW)[w];
      }
    return out;
  };

  std::vector<T> out = run(x.data(), true);
  auto xn = x.node();
  const int64_t Hc = H, Wc = W, Cc = C, batchc = batch, rc = r;
  auto backward = [xn, kern, normH, normW, Hc, Wc, Cc, batchc, rc](TensorNode<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    // Adjoint of y = Dw Kw Dh Kh x is Kh^T Dh Kw^T Dw g; the zero-padded
    // symmetric kernel matrix is its own transpose.
    const auto& g = self.grad;
    std::vector<T> tmp(g.size());
    const int64_t planeC = Wc * Cc;
    // Dw then Kw^T (= Kw)
    std::vector<T> t1(g.size(), T(0));
    for (int64_t b = 0; b < batchc; ++b)
      for (int64_t h = 0; h < Hc; ++h) {
        const T* src = g.data() + (b * Hc + h) * planeC;
        T* dst = t1.data() + (b * Hc + h) * planeC;
        for (int64_t w = 0; w < Wc; ++w) {
          for (int64_t j = -rc; j <= rc; ++j) {
            const int64_t ww = w + j;
            if (ww < 0 || ww >= Wc) continue;
            const T kv = (*kern)[static_cast<size_t>(j + rc)] * (*normW)[ww];
            for (int64_t c = 0; c < Cc; ++c) dst[w * Cc + c] += kv * src[ww * Cc + c];
          }
        }
      }
    // Dh then Kh^T (= Kh)
    for (int64_t b = 0; b < batchc; ++b) {
      const T* src = t1.data() + b * Hc * planeC;
      T* dst = xn->grad.data() + b * Hc * planeC;
      for (int64_t h = 0; h < Hc; ++h)
        for (int64_t j = -rc; j <= rc; ++j) {
          const int64_t hh = h + j;
          if (hh < 0 || hh >= Hc) continue;
          const T kv = (*kern)[static_cast<size_t>(j + rc)] * (*normH)[hh];
          const T* s = src + hh * planeC;
          T* d = dst + h * planeC;
          for (int64_t q = 0; q < planeC; ++q) d[q] += kv * s[q];
        }
    }
  };
  return Tensor<T>(detail::make_result<T>(x.shape(), std::move(out), {xn}, backward));
}

// ---------------------------------------------------------------------------
// Patch <-> token rearrangement for [B,H,W,C] images.

template <typename T>
Tensor<T> patchify(const Tensor<T>& img, int64_t patch) {
  if (img.rank() != 4) throw std::invalid_argument("patchify expects [B,H,W,C]");
  const int64_t B = img.dim(0), H = img.dim(1), W = img.dim(2), C = img.dim(3);
  if (H % patch != 0 || W % patch != 0)
    throw std::invalid_argument("image size not divisible by patch size");
  const int64_t gr = H / patch, gc = W / patch;
  const int64_t tokens = gr * gc, tdim = patch * patch * C;
  std::vector<T> out(static_cast<size_t>(B * tokens * tdim));
  const auto& d = img.data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t tr = 0; tr < gr; ++tr)
      for (int64_t tc = 0; tc < gc; ++tc) {
        T* dst = out.data() + ((b * tokens + tr * gc + tc) * tdim);
        for (int64_t pr = 0; pr < patch; ++pr)
          for (int64_t pc = 0; pc < patch; ++pc)
            for (int64_t c = 0; c < C; ++c)
              dst[(pr * patch + pc) * C + c] =
                  d[((b * H + tr * patch + pr) * W + tc * patch + pc) * C + c];
      }
  auto in = img.node();
  auto backward = [in, B, H, W, C, patch, gr, gc, tokens, tdim](TensorNode<T>& self) {
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t tr = 0; tr < gr; ++tr)
        for (int64_t tc = 0; tc < gc; ++tc) {
          const T* g = self.grad.data() + ((b * tokens + tr * gc + tc) * tdim);
          for (int64_t pr = 0; pr < patch; ++pr)
            for (int64_t pc = 0; pc < patch; ++pc)
              for (int64_t c = 0; c < C; ++c)
                in->grad[((b * H + tr * patch + pr) * W + tc * patch + pc) * C + c] +=
                    g[(pr * patch + pc) * C + c];
        }
  };
  return Tensor<T>(detail::make_result<T>(Shape{B, tokens, tdim}, std::move(out), {in}, backward));
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& tokens, int64_t patch, int64_t H, int64_t W, int64_t C) {
  if (tokens.rank() != 3) throw std::invalid_argument("unpatchify expects [B,tokens,tdim]");
  const int64_t B = tokens.dim(0), ntok = tokens.dim(1), tdim = tokens.dim(2);
  const int64_t gr = H / patch, gc = W / patch;
  if (ntok != gr * gc || tdim != patch * patch * C)
    throw std::invalid_argument("unpatchify shape mismatch");
  std::vector<T> out(static_cast<size_t>(B * H * W * C));
  const auto& d = tokens.data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t tr = 0; tr < gr; ++tr)
      for (int64_t tc = 0; tc < gc; ++tc) {
        const T* src = d.data() + ((b * ntok + tr * gc + tc) * tdim);
        for (int64_t pr = 0; pr < patch; ++pr)
          for (int64_t pc = 0; pc < patch; ++pc)
            for (int64_t c = 0; c < C; ++c)
              out[((b * H + tr * patch + pr) * W + tc * patch + pc) * C + c] =
                  src[(pr * patch + pc) * C + c];
      }
  auto in = tokens.node();
  auto backward = [in, B, H, W, C, patch, gr, gc, ntok, tdim](TensorNode<T>& self) {
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t tr = 0; tr < gr; ++tr)
        for (int64_t tc = 0; tc < gc; ++tc) {
          T* g = in->grad.data() + ((b * ntok + tr * gc + tc) * tdim);
          for (int64_t pr = 0; pr < patch; ++pr)
            for (int64_t pc = 0; pc < patch; ++pc)
              for (int64_t c = 0; c < C; ++c)
                g[(pr * patch + pc) * C + c] +=
                    self.grad[((b * H + tr * patch + pr) * W + tc * patch + pc) * C + c];
        }
  };
  return Tensor<T>(detail::make_result<T>(Shape{B, H, W, C}, std::move(out), {in}, backward));
}

// ---------------------------------------------------------------------------
// 2-D rotary position embedding. Head dims are split axially: the first half
// of the rotation pairs carries the row coordinate, the rest the column.

template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, const std::vector<std::pair<int, int>>& positions,
                     double base = 100.0, bool inverse = false) {
  if (x.rank() != 4) throw std::invalid_argument("rope_apply expects [b,h,t,d]");
  const int64_t b = x.dim(0), h = x.dim(1), t = x.dim(2), d = x.dim(3);
  if (d % 2 != 0) throw std::invalid_argument("rope_apply requires even head dimension");
  if (static_cast<int64_t>(positions.size()) != t)
    throw std::invalid_argument("rope_apply: positions length must equal token count");
  const int64_t pairs = d / 2;
  const int64_t row_pairs = (pairs + 1) / 2;
  // angle table [t, pairs]
  auto cos_tab = std::make_shared<std::vector<T>>(static_cast<size_t>(t * pairs));
  auto sin_tab = std::make_shared<std::vector<T>>(static_cast<size_t>(t * pairs));
  for (int64_t ti = 0; ti < t; ++ti)
    for (int64_t p = 0; p < pairs; ++p) {
      const bool row = p < row_pairs;
      const int64_t gi = row ? p : p - row_pairs;
      const int64_t gsize = row ? row_pairs : pairs - row_pairs;
      const double freq = std::pow(base, -static_cast<double>(gi) / static_cast<double>(gsize));
      const double pos = row ? positions[ti].first : positions[ti].second;
      const double ang = (inverse ? -1.0 : 1.0) * pos * freq;
      (*cos_tab)[ti * pairs + p] = static_cast<T>(std::cos(ang));
      (*sin_tab)[ti * pairs + p] = static_cast<T>(std::sin(ang));
    }
  const int64_t n = x.numel();
  std::vector<T> out(static_cast<size_t>(n));
  const auto& xd = x.data();
  for (int64_t i = 0; i < b * h; ++i)
    for (int64_t ti = 0; ti < t; ++ti) {
      const int64_t off = (i * t + ti) * d;
      for (int64_t p = 0; p < pairs; ++p) {
        const T c = (*cos_tab)[ti * pairs + p], s = (*sin_tab)[ti * pairs + p];
        const T x0 = xd[off + 2 * p], x1 = xd[off + 2 * p + 1];
        out[off + 2 * p] = c * x0 - s * x1;
        out[off + 2 * p + 1] = s * x0 + c * x1;
      }
    }
  auto xn = x.node();
  auto backward = [xn, cos_tab, sin_tab, b, h, t, d, pairs](TensorNode<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const auto& g = self.grad;
    for (int64_t i = 0; i < b * h; ++i)
      for (int64_t ti = 0; ti < t; ++ti) {
        const int64_t off = (i * t + ti) * d;
        for (int64_t p = 0; p < pairs; ++p) {
          const T c = (*cos_tab)[ti * pairs + p], s = (*sin_tab)[ti * pairs + p];
          const T g0 = g[off + 2 * p], g1 = g[off + 2 * p + 1];
          xn->grad[off + 2 * p] += c * g0 + s * g1;      // inverse rotation
          xn->grad[off + 2 * p + 1] += -s * g0 + c * g1;
        }
      }
  };
  return Tensor<T>(detail::make_result<T>(x.shape(), std::move(out), {xn}, backward));
}

// ---------------------------------------------------------------------------
// Backward pass: reverse execution order over the recorded graph.

template <typename T>
void backward(Tensor<T> loss) {
  if (loss.numel() != 1) throw std::invalid_argument("backward requires a scalar loss");
  auto root = loss.node();
  if (!root->requires_grad)
    throw std::invalid_argument("backward on a tensor outside the gradient tape");

  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<TensorNode<T>*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (p && p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const TensorNode<T>* a, const TensorNode<T>* b) { return a->seq > b->seq; });

  root->ensure_grad();
  root->grad[0] = T(1);
  for (auto* n : order) {
    if (!n->backward_fn) continue;
    n->ensure_grad();
    n->backward_fn(*n);
  }
}

}  // namespace xfactor
