#pragma once

// Dense tensors of 64-bit floats with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared node. Operations evaluate eagerly
// and, when gradients are enabled and an input lies on a parameter path,
// record the producing operation so that backward() can replay the chain
// rule. The graph is acyclic by construction (nodes only ever reference
// their inputs) and backward visits each node exactly once in reverse
// topological order, so repeated backward calls on the same graph are
// deterministic. Tensors detached from the graph never receive gradients.
//
// Broadcasting is deliberately restricted to rank-0-with-anything; the
// architectures built on top never need more, and the structured ops
// (add_rowvec, slice_cols, concat_cols, permute_cols, transpose) cover the
// remaining shape plumbing with exact backward rules.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vdp/errors.hpp"

namespace vdp {

class Tensor;

namespace detail {

struct TensorImpl;
using GradStore = std::unordered_map<const TensorImpl*, std::vector<double>>;
using BackwardFn = std::function<void(const std::vector<double>&, GradStore&)>;

struct TensorImpl {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  bool requires_grad = false;  // leaf parameter
  bool grad_path = false;      // a parameter is reachable through this node
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::size_t shape_size(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline void add_into(std::vector<double>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

inline void accumulate(GradStore& store, const TensorImpl* target, std::vector<double>&& g) {
  auto it = store.find(target);
  if (it == store.end()) {
    store.emplace(target, std::move(g));
  } else {
    add_into(it->second, g);
  }
}

// C[m,n] = A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] = A[m,k] * B[n,k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] = acc;
    }
  }
}

// C[m,n] = A[k,m]^T * B[k,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  std::fill(c, c + m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data) {
    if (detail::shape_size(shape) != data.size()) {
      throw ShapeError("tensor shape " + detail::shape_str(shape) + " wants " +
                       std::to_string(detail::shape_size(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return Tensor(std::move(impl));
  }

  static Tensor zeros(std::vector<std::size_t> shape) {
    std::vector<double> d(detail::shape_size(shape), 0.0);
    return from_data(std::move(shape), std::move(d));
  }

  static Tensor full(std::vector<std::size_t> shape, double v) {
    std::vector<double> d(detail::shape_size(shape), v);
    return from_data(std::move(shape), std::move(d));
  }

  static Tensor scalar(double v) { return from_data({}, {v}); }

  // Leaf tensor that collects gradients and may be updated in place by an
  // optimizer between graph builds.
  static Tensor parameter(std::vector<std::size_t> shape, std::vector<double> data) {
    Tensor t = from_data(std::move(shape), std::move(data));
    t.impl_->requires_grad = true;
    t.impl_->grad_path = true;
    return t;
  }

  static Tensor zero_parameter(std::vector<std::size_t> shape) {
    std::vector<double> d(detail::shape_size(shape), 0.0);
    return parameter(std::move(shape), std::move(d));
  }

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  const std::vector<double>& data() const { return impl_->data; }

  // In-place access for leaves (optimizer updates, test perturbations).
  // Mutating a tensor that still participates in a live graph invalidates
  // that graph; callers rebuild graphs per step.
  std::vector<double>& mutable_data() { return impl_->data; }

  double value() const {
    if (size() != 1) {
      throw ShapeError("value() requires a single-element tensor, shape is " +
                       detail::shape_str(shape()));
    }
    return impl_->data[0];
  }

  double at(std::size_t i) const { return impl_->data.at(i); }

  double at(std::size_t i, std::size_t j) const {
    if (rank() != 2) throw ShapeError("at(i,j) requires rank 2, shape is " + shape_string());
    return impl_->data[i * shape()[1] + j];
  }

  std::string shape_string() const { return detail::shape_str(shape()); }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  bool on_grad_path() const { return impl_ && impl_->grad_path; }

  // Same values, no graph membership: never receives a gradient.
  Tensor detach() const { return from_data(impl_->shape, impl_->data); }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

inline void attach_node(Tensor& out, std::initializer_list<Tensor> inputs, BackwardFn fn) {
  if (!grad_mode_flag()) return;
  bool path = false;
  for (const auto& t : inputs) path = path || t.on_grad_path();
  if (!path) return;
  auto& impl = *out.impl();
  impl.grad_path = true;
  for (const auto& t : inputs) impl.inputs.push_back(t.impl());
  impl.backward = std::move(fn);
}

}  // namespace detail

// Gradient results of backward(): parameter identity -> gradient values.
// Absent entries mean an exactly-zero gradient.
class Gradients {
 public:
  bool contains(const Tensor& t) const { return g_.count(t.impl().get()) != 0; }

  const std::vector<double>* find(const Tensor& t) const {
    auto it = g_.find(t.impl().get());
    return it == g_.end() ? nullptr : &it->second;
  }

  const std::vector<double>& at(const Tensor& t) const {
    auto it = g_.find(t.impl().get());
    if (it == g_.end()) throw ValueError("no gradient recorded for the given parameter");
    return it->second;
  }

  std::vector<double>& at_mut(const Tensor& t) {
    auto it = g_.find(t.impl().get());
    if (it == g_.end()) throw ValueError("no gradient recorded for the given parameter");
    return it->second;
  }

  std::size_t count() const { return g_.size(); }

  void scale_all(double s) {
    for (auto& kv : g_)
      for (double& v : kv.second) v *= s;
  }

  void set(const Tensor& t, std::vector<double> g) { g_[t.impl().get()] = std::move(g); }

  void set_raw(const detail::TensorImpl* key, std::vector<double> g) { g_[key] = std::move(g); }

 private:
  std::unordered_map<const detail::TensorImpl*, std::vector<double>> g_;
};

// ---------------------------------------------------------------------------
// Elementwise arithmetic

namespace detail {

enum class BinKind { Add, Sub, Mul, Div };

inline Tensor binary_elementwise(const Tensor& a, const Tensor& b, BinKind kind,
                                 const char* opname) {
  const bool a_scalar = a.rank() == 0;
  const bool b_scalar = b.rank() == 0;
  if (!(a.shape() == b.shape() || a_scalar || b_scalar)) {
    throw ShapeError(std::string(opname) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) +
                     " are incompatible (equal shapes or rank-0 broadcast required)");
  }
  const auto& out_shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = a_scalar ? b.size() : a.size();
  const auto& ad = a.data();
  const auto& bd = b.data();

  if (kind == BinKind::Div) {
    if (b_scalar) {
      if (bd[0] == 0.0) throw DomainError("div: division by zero");
    } else {
      for (double v : bd)
        if (v == 0.0) throw DomainError("div: division by zero");
    }
  }

  std::vector<double> out(n);
  auto av = [&](std::size_t i) { return a_scalar ? ad[0] : ad[i]; };
  auto bv = [&](std::size_t i) { return b_scalar ? bd[0] : bd[i]; };
  switch (kind) {
    case BinKind::Add:
      for (std::size_t i = 0; i < n; ++i) out[i] = av(i) + bv(i);
      break;
    case BinKind::Sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av(i) - bv(i);
      break;
    case BinKind::Mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av(i) * bv(i);
      break;
    case BinKind::Div:
      for (std::size_t i = 0; i < n; ++i) out[i] = av(i) / bv(i);
      break;
  }

  Tensor result = Tensor::from_data(out_shape, std::move(out));
  auto pa = a.impl();
  auto pb = b.impl();
  attach_node(result, {a, b}, [pa, pb, a_scalar, b_scalar, kind](const std::vector<double>& g,
                                                                 GradStore& gs) {
    const std::size_t n = g.size();
    const auto& ad = pa->data;
    const auto& bd = pb->data;
    auto reduce_if_scalar = [&](bool is_scalar, std::vector<double>&& full) {
      if (!is_scalar) return std::move(full);
      double s = 0.0;
      for (double v : full) s += v;
      return std::vector<double>{s};
    };
    if (pa->grad_path) {
      std::vector<double> ga(n);
      switch (kind) {
        case BinKind::Add:
        case BinKind::Sub:
          ga = g;
          break;
        case BinKind::Mul:
          for (std::size_t i = 0; i < n; ++i) ga[i] = g[i] * (b_scalar ? bd[0] : bd[i]);
          break;
        case BinKind::Div:
          for (std::size_t i = 0; i < n; ++i) ga[i] = g[i] / (b_scalar ? bd[0] : bd[i]);
          break;
      }
      accumulate(gs, pa.get(), reduce_if_scalar(a_scalar, std::move(ga)));
    }
    if (pb->grad_path) {
      std::vector<double> gb(n);
      switch (kind) {
        case BinKind::Add:
          gb = g;
          break;
        case BinKind::Sub:
          for (std::size_t i = 0; i < n; ++i) gb[i] = -g[i];
          break;
        case BinKind::Mul:
          for (std::size_t i = 0; i < n; ++i) gb[i] = g[i] * (a_scalar ? ad[0] : ad[i]);
          break;
        case BinKind::Div:
          for (std::size_t i = 0; i < n; ++i) {
            const double bi = b_scalar ? bd[0] : bd[i];
            const double ai = a_scalar ? ad[0] : ad[i];
            gb[i] = -g[i] * ai / (bi * bi);
          }
          break;
      }
      accumulate(gs, pb.get(), reduce_if_scalar(b_scalar, std::move(gb)));
    }
  });
  return result;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(a, b, detail::BinKind::Add, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(a, b, detail::BinKind::Sub, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(a, b, detail::BinKind::Mul, "mul");
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(a, b, detail::BinKind::Div, "div");
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_elementwise(const Tensor& a, Fwd fwd, Bwd make_backward) {
  const auto& ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
  Tensor result = Tensor::from_data(a.shape(), std::move(out));
  attach_node(result, {a}, make_backward(a, result));
  return result;
}

}  // namespace detail

inline Tensor exp(const Tensor& a) {
  return detail::unary_elementwise(
      a, [](double x) { return std::exp(x); },
      [](const Tensor& in, const Tensor& out) {
        auto pa = in.impl();
        std::vector<double> y = out.data();  // copy, not the impl, to avoid a self-cycle
        return [pa, y = std::move(y)](const std::vector<double>& g, detail::GradStore& gs) {
          std::vector<double> ga(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * y[i];
          detail::accumulate(gs, pa.get(), std::move(ga));
        };
      });
}

inline Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw DomainError("log: argument must be strictly positive, got " +
                                      std::to_string(v));
  }
  return detail::unary_elementwise(
      a, [](double x) { return std::log(x); },
      [](const Tensor& in, const Tensor&) {
        auto pa = in.impl();
        return [pa](const std::vector<double>& g, detail::GradStore& gs) {
          std::vector<double> ga(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] / pa->data[i];
          detail::accumulate(gs, pa.get(), std::move(ga));
        };
      });
}

inline Tensor square(const Tensor& a) {
  return detail::unary_elementwise(
      a, [](double x) { return x * x; },
      [](const Tensor& in, const Tensor&) {
        auto pa = in.impl();
        return [pa](const std::vector<double>& g, detail::GradStore& gs) {
          std::vector<double> ga(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] = 2.0 * pa->data[i] * g[i];
          detail::accumulate(gs, pa.get(), std::move(ga));
        };
      });
}

inline Tensor negate(const Tensor& a) {
  return detail::unary_elementwise(
      a, [](double x) { return -x; },
      [](const Tensor& in, const Tensor&) {
        auto pa = in.impl();
        return [pa](const std::vector<double>& g, detail::GradStore& gs) {
          std::vector<double> ga(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] = -g[i];
          detail::accumulate(gs, pa.get(), std::move(ga));
        };
      });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary_elementwise(
      a, [](double x) { return std::tanh(x); },
      [](const Tensor& in, const Tensor& out) {
        auto pa = in.impl();
        std::vector<double> y = out.data();
        return [pa, y = std::move(y)](const std::vector<double>& g, detail::GradStore& gs) {
          std::vector<double> ga(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * (1.0 - y[i] * y[i]);
          detail::accumulate(gs, pa.get(), std::move(ga));
        };
      });
}

// Subgradient at 0 is 0.
inline Tensor relu(const Tensor& a) {
  return detail::unary_elementwise(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](const Tensor& in, const Tensor&) {
        auto pa = in.impl();
        return [pa](const std::vector<double>& g, detail::GradStore& gs) {
          std::vector<double> ga(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] = pa->data[i] > 0.0 ? g[i] : 0.0;
          detail::accumulate(gs, pa.get(), std::move(ga));
        };
      });
}

namespace detail {
inline double softplus_value(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
inline double sigmoid_value(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
}  // namespace detail

inline Tensor softplus(const Tensor& a) {
  return detail::unary_elementwise(
      a, detail::softplus_value,
      [](const Tensor& in, const Tensor&) {
        auto pa = in.impl();
        return [pa](const std::vector<double>& g, detail::GradStore& gs) {
          std::vector<double> ga(g.size());
          for (std::size_t i = 0; i < g.size(); ++i)
            ga[i] = g[i] * detail::sigmoid_value(pa->data[i]);
          detail::accumulate(gs, pa.get(), std::move(ga));
        };
      });
}

// Gradient passes through where lo <= x <= hi and is zero where the input
// was clipped.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw ValueError("clamp: lo must be <= hi");
  return detail::unary_elementwise(
      a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](const Tensor& in, const Tensor&) {
        auto pa = in.impl();
        return [pa, lo, hi](const std::vector<double>& g, detail::GradStore& gs) {
          std::vector<double> ga(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = pa->data[i];
            ga[i] = (x >= lo && x <= hi) ? g[i] : 0.0;
          }
          detail::accumulate(gs, pa.get(), std::move(ga));
        };
      });
}

// Dispatcher mirroring the named elementwise surface.
enum class EltwiseOp { Add, Sub, Mul, Div, Exp, Log, Square, Negate, Tanh, Relu, Softplus };

inline Tensor elementwise(EltwiseOp op, const Tensor& a,
                          const std::optional<Tensor>& b = std::nullopt) {
  const bool binary = op == EltwiseOp::Add || op == EltwiseOp::Sub || op == EltwiseOp::Mul ||
                      op == EltwiseOp::Div;
  if (binary && !b) throw ValueError("elementwise: binary op requires a second operand");
  if (!binary && b) throw ValueError("elementwise: unary op takes exactly one operand");
  switch (op) {
    case EltwiseOp::Add: return add(a, *b);
    case EltwiseOp::Sub: return sub(a, *b);
    case EltwiseOp::Mul: return mul(a, *b);
    case EltwiseOp::Div: return div(a, *b);
    case EltwiseOp::Exp: return exp(a);
    case EltwiseOp::Log: return log(a);
    case EltwiseOp::Square: return square(a);
    case EltwiseOp::Negate: return negate(a);
    case EltwiseOp::Tanh: return tanh(a);
    case EltwiseOp::Relu: return relu(a);
    case EltwiseOp::Softplus: return softplus(a);
  }
  throw ValueError("elementwise: unknown op");
}

// Operator sugar.
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
inline Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
inline Tensor operator/(double a, const Tensor& b) { return div(Tensor::scalar(a), b); }
inline Tensor operator-(const Tensor& a) { return negate(a); }

// ---------------------------------------------------------------------------
// Matrix ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: requires rank-2 operands, got " + a.shape_string() + " and " +
                     b.shape_string());
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions disagree, " + a.shape_string() + " vs " +
                     b.shape_string());
  }
  std::vector<double> out(m * n);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  Tensor result = Tensor::from_data({m, n}, std::move(out));
  auto pa = a.impl();
  auto pb = b.impl();
  detail::attach_node(result, {a, b},
                      [pa, pb, m, k, n](const std::vector<double>& g, detail::GradStore& gs) {
                        if (pa->grad_path) {
                          std::vector<double> ga(m * k);
                          detail::gemm_nt(g.data(), pb->data.data(), ga.data(), m, n, k);
                          detail::accumulate(gs, pa.get(), std::move(ga));
                        }
                        if (pb->grad_path) {
                          std::vector<double> gb(k * n);
                          detail::gemm_tn(pa->data.data(), g.data(), gb.data(), k, m, n);
                          detail::accumulate(gs, pb.get(), std::move(gb));
                        }
                      });
  return result;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: requires rank 2, got " + a.shape_string());
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
  Tensor result = Tensor::from_data({c, r}, std::move(out));
  auto pa = a.impl();
  detail::attach_node(result, {a},
                      [pa, r, c](const std::vector<double>& g, detail::GradStore& gs) {
                        std::vector<double> ga(r * c);
                        for (std::size_t i = 0; i < r; ++i)
                          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = g[j * r + i];
                        detail::accumulate(gs, pa.get(), std::move(ga));
                      });
  return result;
}

// M[r,c] + v[c] broadcast over rows.
inline Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  if (m.rank() != 2 || v.rank() != 1 || m.shape()[1] != v.shape()[0]) {
    throw ShapeError("add_rowvec: want [r,c] and [c], got " + m.shape_string() + " and " +
                     v.shape_string());
  }
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m.data()[i * c + j] + v.data()[j];
  Tensor result = Tensor::from_data({r, c}, std::move(out));
  auto pm = m.impl();
  auto pv = v.impl();
  detail::attach_node(result, {m, v},
                      [pm, pv, r, c](const std::vector<double>& g, detail::GradStore& gs) {
                        if (pm->grad_path) {
                          detail::accumulate(gs, pm.get(), std::vector<double>(g));
                        }
                        if (pv->grad_path) {
                          std::vector<double> gv(c, 0.0);
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
                          detail::accumulate(gs, pv.get(), std::move(gv));
                        }
                      });
  return result;
}

inline Tensor slice_cols(const Tensor& m, std::size_t start, std::size_t count) {
  if (m.rank() != 2) throw ShapeError("slice_cols: requires rank 2, got " + m.shape_string());
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  if (start + count > c) {
    throw ValueError("slice_cols: range [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") exceeds " + std::to_string(c) +
                     " columns");
  }
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = m.data()[i * c + start + j];
  Tensor result = Tensor::from_data({r, count}, std::move(out));
  auto pm = m.impl();
  detail::attach_node(result, {m},
                      [pm, r, c, start, count](const std::vector<double>& g,
                                               detail::GradStore& gs) {
                        std::vector<double> gm(r * c, 0.0);
                        for (std::size_t i = 0; i < r; ++i)
                          for (std::size_t j = 0; j < count; ++j)
                            gm[i * c + start + j] = g[i * count + j];
                        detail::accumulate(gs, pm.get(), std::move(gm));
                      });
  return result;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0]) {
    throw ShapeError("concat_cols: want equal row counts, got " + a.shape_string() + " and " +
                     b.shape_string());
  }
  const std::size_t r = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
  std::vector<double> out(r * (p + q));
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < p; ++j) out[i * (p + q) + j] = a.data()[i * p + j];
    for (std::size_t j = 0; j < q; ++j) out[i * (p + q) + p + j] = b.data()[i * q + j];
  }
  Tensor result = Tensor::from_data({r, p + q}, std::move(out));
  auto pa = a.impl();
  auto pb = b.impl();
  detail::attach_node(result, {a, b},
                      [pa, pb, r, p, q](const std::vector<double>& g, detail::GradStore& gs) {
                        if (pa->grad_path) {
                          std::vector<double> ga(r * p);
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < p; ++j) ga[i * p + j] = g[i * (p + q) + j];
                          detail::accumulate(gs, pa.get(), std::move(ga));
                        }
                        if (pb->grad_path) {
                          std::vector<double> gb(r * q);
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < q; ++j)
                              gb[i * q + j] = g[i * (p + q) + p + j];
                          detail::accumulate(gs, pb.get(), std::move(gb));
                        }
                      });
  return result;
}

// out[:, j] = m[:, perm[j]]
inline Tensor permute_cols(const Tensor& m, const std::vector<std::size_t>& perm) {
  if (m.rank() != 2) throw ShapeError("permute_cols: requires rank 2, got " + m.shape_string());
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  if (perm.size() != c) throw ValueError("permute_cols: permutation size mismatch");
  std::vector<bool> seen(c, false);
  for (auto p : perm) {
    if (p >= c || seen[p]) throw ValueError("permute_cols: not a permutation");
    seen[p] = true;
  }
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m.data()[i * c + perm[j]];
  Tensor result = Tensor::from_data({r, c}, std::move(out));
  auto pm = m.impl();
  detail::attach_node(result, {m},
                      [pm, r, c, perm](const std::vector<double>& g, detail::GradStore& gs) {
                        std::vector<double> gm(r * c, 0.0);
                        for (std::size_t i = 0; i < r; ++i)
                          for (std::size_t j = 0; j < c; ++j) gm[i * c + perm[j]] += g[i * c + j];
                        detail::accumulate(gs, pm.get(), std::move(gm));
                      });
  return result;
}

// ---------------------------------------------------------------------------
// Reductions

namespace detail {

inline Tensor reduce_full(const Tensor& a, bool mean_flag) {
  const std::size_t n = a.size();
  double s = 0.0;
  for (double v : a.data()) s += v;
  if (mean_flag) s /= static_cast<double>(n);
  Tensor result = Tensor::scalar(s);
  auto pa = a.impl();
  attach_node(result, {a}, [pa, n, mean_flag](const std::vector<double>& g, GradStore& gs) {
    const double gv = mean_flag ? g[0] / static_cast<double>(n) : g[0];
    accumulate(gs, pa.get(), std::vector<double>(n, gv));
  });
  return result;
}

inline Tensor reduce_axis(const Tensor& a, std::size_t axis, bool mean_flag) {
  if (axis >= a.rank()) {
    throw ValueError("reduce: axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(a.rank()));
  }
  if (a.rank() == 1) return reduce_full(a, mean_flag);
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  const std::size_t out_n = axis == 0 ? c : r;
  const std::size_t denom = axis == 0 ? r : c;
  std::vector<double> out(out_n, 0.0);
  if (axis == 0) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[j] += a.data()[i * c + j];
  } else {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i] += a.data()[i * c + j];
  }
  if (mean_flag)
    for (double& v : out) v /= static_cast<double>(denom);
  Tensor result = Tensor::from_data({out_n}, std::move(out));
  auto pa = a.impl();
  attach_node(result, {a},
              [pa, r, c, axis, mean_flag, denom](const std::vector<double>& g, GradStore& gs) {
                std::vector<double> ga(r * c);
                const double scale = mean_flag ? 1.0 / static_cast<double>(denom) : 1.0;
                for (std::size_t i = 0; i < r; ++i)
                  for (std::size_t j = 0; j < c; ++j)
                    ga[i * c + j] = scale * (axis == 0 ? g[j] : g[i]);
                accumulate(gs, pa.get(), std::move(ga));
              });
  return result;
}

}  // namespace detail

inline Tensor sum(const Tensor& a) { return detail::reduce_full(a, false); }
inline Tensor mean(const Tensor& a) { return detail::reduce_full(a, true); }
inline Tensor sum(const Tensor& a, std::size_t axis) { return detail::reduce_axis(a, axis, false); }
inline Tensor mean(const Tensor& a, std::size_t axis) { return detail::reduce_axis(a, axis, true); }

enum class ReduceOp { Sum, Mean };

inline Tensor reduce(ReduceOp op, const Tensor& a,
                     const std::optional<std::size_t>& axis = std::nullopt) {
  if (axis) {
    return op == ReduceOp::Sum ? sum(a, *axis) : mean(a, *axis);
  }
  return op == ReduceOp::Sum ? sum(a) : mean(a);
}

// Broadcast a rank-1 vector across `rows` identical rows; gradients reduce by
// column sums.
inline Tensor broadcast_rows(const Tensor& v, std::size_t rows) {
  if (v.rank() != 1) throw ShapeError("broadcast_rows: requires rank 1, got " + v.shape_string());
  return add_rowvec(Tensor::zeros({rows, v.shape()[0]}), v);
}

// ---------------------------------------------------------------------------
// Reverse-mode sweep

inline Gradients backward(const Tensor& output) {
  if (output.rank() != 0) {
    throw ShapeError("backward: output must be rank 0, shape is " + output.shape_string());
  }
  if (!output.on_grad_path()) {
    throw ValueError("backward: output is not attached to a graph with parameters");
  }

  // Iterative postorder DFS; children precede parents in `order`.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<const detail::TensorImpl*> visited;
  struct Frame {
    detail::TensorImpl* node;
    std::size_t next = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({output.impl().get()});
  visited.insert(output.impl().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->inputs.size()) {
      detail::TensorImpl* child = f.node->inputs[f.next++].get();
      if (child->grad_path && visited.insert(child).second) stack.push_back({child});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  detail::GradStore store;
  store.emplace(output.impl().get(), std::vector<double>{1.0});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* node = *it;
    if (!node->backward) continue;
    auto found = store.find(node);
    if (found == store.end()) continue;
    node->backward(found->second, store);
  }

  Gradients result;
  for (detail::TensorImpl* node : order) {
    if (!node->requires_grad) continue;
    auto found = store.find(node);
    if (found == store.end()) continue;
    result.set_raw(node, std::move(found->second));
  }
  return result;
}

}  // namespace vdp
