#pragma once

#include <Eigen/Core>
#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "dde/tensor.hpp"

namespace dde {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid until the tape is cleared.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
// insertion order is a valid topological order for the backward sweep.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad = false;
    const char* op = "leaf";
  };

  Var leaf(Tensor v) {
    bool rg = v.requires_grad();
    return push(std::move(v), {}, nullptr, rg, "leaf");
  }
  Var variable(Tensor v) { return push(std::move(v), {}, nullptr, true, "leaf"); }
  Var constant(Tensor v) { return push(std::move(v), {}, nullptr, false, "constant"); }

  Var record(const char* op, Tensor value, std::initializer_list<Var> parents, Backward bw) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
    std::vector<std::size_t> ids;
    bool rg = false;
    for (const Var& p : parents) {
      if (p.tape() != this) throw ContractError(std::string(op) + ": operand belongs to another tape");
      ids.push_back(p.id());
      rg = rg || nodes_[p.id()].requires_grad;
    }
    return push(std::move(value), std::move(ids), rg ? std::move(bw) : nullptr, rg, op);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<double>& grad(std::size_t id) const { return nodes_[id].grad; }

  std::vector<double>& grad_buffer(std::size_t id) {
    auto& g = nodes_[id].grad;
    if (g.empty()) g.assign(nodes_[id].value.size(), 0.0);
    return g;
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Gradients of a single-element root with respect to each of `wrt`.
  std::vector<Tensor> gradients(const Var& root, const std::vector<Var>& wrt) {
    if (root.tape() != this) throw ContractError("gradients: root belongs to another tape");
    if (root.value().size() != 1)
      throw DimensionError("gradients: root must hold one value, got " + shape_str(root.shape()));
    for (auto& n : nodes_) n.grad.clear();
    grad_buffer(root.id())[0] = 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
    std::vector<Tensor> out;
    out.reserve(wrt.size());
    for (const Var& v : wrt) {
      const auto& g = nodes_[v.id()].grad;
      Tensor t(v.shape(), 0.0);
      if (!g.empty()) t.vec() = g;
      out.push_back(std::move(t));
    }
    return out;
  }

 private:
  Var push(Tensor v, std::vector<std::size_t> parents, Backward bw, bool rg, const char* op) {
    nodes_.push_back(Node{std::move(v), {}, std::move(parents), std::move(bw), rg, op});
    return Var(this, nodes_.size() - 1);
  }
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value(id_);
}

namespace ad {

namespace impl {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<RowMat>;
using CMapR = Eigen::Map<const RowMat>;

inline Tape& same_tape(const Var& a, const Var& b, const char* op) {
  if (!a.valid() || a.tape() != b.tape()) throw ContractError(std::string(op) + ": operands on different tapes");
  return *a.tape();
}

template <class F, class DF>
Var unary(const char* op, const Var& a, F f, DF df) {
  Tape& t = *a.tape();
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  std::size_t ia = a.id();
  return t.record(op, std::move(y), {a}, [ia, df](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const Tensor& xv = tp.value(ia);
    const Tensor& yv = tp.value(self);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
  });
}

// Elementwise with scalar broadcast on either side.
template <class F, class DA, class DB>
Var binary(const char* op, const Var& a, const Var& b, F f, DA da, DB db) {
  Tape& t = same_tape(a, b, op);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  bool as = x.size() == 1 && y.size() != 1;
  bool bs = y.size() == 1 && x.size() != 1;
  if (!as && !bs && x.shape() != y.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(y.shape()));
  Tensor out(as ? y.shape() : x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[as ? 0 : i], y[bs ? 0 : i]);
  std::size_t ia = a.id(), ib = b.id();
  return t.record(op, std::move(out), {a, b}, [ia, ib, as, bs, da, db](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const Tensor& xv = tp.value(ia);
    const Tensor& yv = tp.value(ib);
    if (tp.requires_grad(ia)) {
      auto& ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[as ? 0 : i] += g[i] * da(xv[as ? 0 : i], yv[bs ? 0 : i]);
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[bs ? 0 : i] += g[i] * db(xv[as ? 0 : i], yv[bs ? 0 : i]);
    }
  });
}

inline void im2col(const double* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
                   std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, double* cols) {
  const std::size_t P = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * P;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            bool in = iy >= 0 && iy < static_cast<long>(H) && ix >= 0 && ix < static_cast<long>(W);
            row[oy * Wo + ox] = in ? x[(c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
}

inline void col2im(const double* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
                   std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, double* dx) {
  const std::size_t P = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * P;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            dx[(c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)] += row[oy * Wo + ox];
          }
        }
      }
}

}  // namespace impl

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ContractError("conv: stride must be positive");
  if (in + 2 * pad < k)
    throw DimensionError("conv: kernel " + std::to_string(k) + " larger than padded input " +
                         std::to_string(in + 2 * pad));
  return (in + 2 * pad - k) / stride + 1;
}

inline Var add(const Var& a, const Var& b) {
  return impl::binary("add", a, b, [](double x, double y) { return x + y; },
                        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}
inline Var sub(const Var& a, const Var& b) {
  return impl::binary("sub", a, b, [](double x, double y) { return x - y; },
                        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}
inline Var mul(const Var& a, const Var& b) {
  return impl::binary("mul", a, b, [](double x, double y) { return x * y; },
                        [](double, double y) { return y; }, [](double x, double) { return x; });
}
inline Var div(const Var& a, const Var& b) {
  return impl::binary("div", a, b, [](double x, double y) { return x / y; },
                        [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

inline Var add_scalar(const Var& a, double c) {
  return impl::unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}
inline Var scale(const Var& a, double c) {
  return impl::unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}
inline Var neg(const Var& a) { return scale(a, -1.0); }
inline Var exp(const Var& a) {
  return impl::unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Var log(const Var& a) {
  return impl::unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Var square(const Var& a) {
  return impl::unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
inline Var abs(const Var& a) {
  return impl::unary("abs", a, [](double x) { return std::abs(x); },
                       [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}
inline Var relu(const Var& a) {
  return impl::unary("relu", a, [](double x) { return x > 0 ? x : 0.0; },
                       [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
inline Var leaky_relu(const Var& a, double slope) {
  return impl::unary("leaky_relu", a, [slope](double x) { return x > 0 ? x : slope * x; },
                       [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}
inline Var logistic(const Var& a) {
  return impl::unary(
      "logistic", a,
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}
inline Var atan(const Var& a) {
  return impl::unary("atan", a, [](double x) { return std::atan(x); },
                       [](double x, double) { return 1.0 / (1.0 + x * x); });
}
inline Var clamp(const Var& a, double lo, double hi) {
  return impl::unary("clamp", a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
                       [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }
inline Var operator+(double c, const Var& a) { return add_scalar(a, c); }
inline Var operator-(const Var& a, double c) { return add_scalar(a, -c); }
inline Var operator-(double c, const Var& a) { return add_scalar(neg(a), c); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator/(const Var& a, double c) { return scale(a, 1.0 / c); }
inline Var operator-(const Var& a) { return neg(a); }

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  std::size_t ia = a.id();
  return a.tape()->record("sum", Tensor::scalar(s), {a}, [ia](Tape& tp, std::size_t self) {
    double g = tp.grad(self)[0];
    for (double& v : tp.grad_buffer(ia)) v += g;
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// Reduce over the last axis: [..., N] -> [...].
inline Var sum_last(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() == 0) throw DimensionError("sum_last on rank-0 tensor");
  std::size_t n = x.shape().back();
  Shape s(x.shape().begin(), x.shape().end() - 1);
  Tensor y(s);
  for (std::size_t r = 0; r < y.size(); ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += x[r * n + j];
    y[r] = acc;
  }
  std::size_t ia = a.id();
  return a.tape()->record("sum_last", std::move(y), {a}, [ia, n](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t r = 0; r < g.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[r];
  });
}

inline Var mean_last(const Var& a) {
  return scale(sum_last(a), 1.0 / static_cast<double>(a.shape().back()));
}

// Reduce over axis 0: [B, N] -> [N].
inline Var sum_rows(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw DimensionError("sum_rows: expected rank 2, got " + shape_str(x.shape()));
  std::size_t B = x.dim(0), n = x.dim(1);
  Tensor y({n});
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t j = 0; j < n; ++j) y[j] += x[r * n + j];
  std::size_t ia = a.id();
  return a.tape()->record("sum_rows", std::move(y), {a}, [ia, B, n](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t r = 0; r < B; ++r)
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[j];
  });
}

// Gather columns of the last axis: [..., N] -> [..., idx.size()].
inline Var select_last(const Var& a, std::vector<std::size_t> idx) {
  const Tensor& x = a.value();
  if (x.rank() == 0) throw DimensionError("select_last on rank-0 tensor");
  std::size_t n = x.shape().back();
  for (auto i : idx)
    if (i >= n) throw DimensionError("select_last: index " + std::to_string(i) + " out of range " + std::to_string(n));
  Shape s = x.shape();
  s.back() = idx.size();
  Tensor y(s);
  std::size_t rows = x.size() / n, k = idx.size();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j) y[r * k + j] = x[r * n + idx[j]];
  std::size_t ia = a.id();
  return a.tape()->record("select_last", std::move(y), {a}, [ia, n, idx = std::move(idx)](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad_buffer(ia);
    std::size_t k = idx.size(), rows = g.size() / (k ? k : 1);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < k; ++j) ga[r * n + idx[j]] += g[r * k + j];
  });
}

inline Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  Tensor y = a.value().rows(begin, end);
  std::size_t stride = a.size() / a.shape()[0];
  std::size_t ia = a.id();
  return a.tape()->record("slice_rows", std::move(y), {a}, [ia, begin, stride](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[begin * stride + i] += g[i];
  });
}

inline Var reshape(const Var& a, Shape s) {
  Tensor y = a.value().reshaped(std::move(s));
  std::size_t ia = a.id();
  return a.tape()->record("reshape", std::move(y), {a}, [ia](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// x [B,F], w [O,F] -> x w^T [B,O]
inline Var linear(const Var& x, const Var& w) {
  Tape& t = impl::same_tape(x, w, "linear");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1))
    throw DimensionError("linear: incompatible shapes " + shape_str(xv.shape()) + " and " + shape_str(wv.shape()));
  std::size_t B = xv.dim(0), F = xv.dim(1), O = wv.dim(0);
  Tensor y({B, O});
  impl::MapR(y.raw(), B, O).noalias() = impl::CMapR(xv.raw(), B, F) * impl::CMapR(wv.raw(), O, F).transpose();
  std::size_t ix = x.id(), iw = w.id();
  return t.record("linear", std::move(y), {x, w}, [ix, iw, B, F, O](Tape& tp, std::size_t self) {
    impl::CMapR G(tp.grad(self).data(), B, O);
    if (tp.requires_grad(ix))
      impl::MapR(tp.grad_buffer(ix).data(), B, F).noalias() += G * impl::CMapR(tp.value(iw).raw(), O, F);
    if (tp.requires_grad(iw))
      impl::MapR(tp.grad_buffer(iw).data(), O, F).noalias() += G.transpose() * impl::CMapR(tp.value(ix).raw(), B, F);
  });
}

// y [B,O], b [O]
inline Var add_bias_rows(const Var& y, const Var& b) {
  Tape& t = impl::same_tape(y, b, "add_bias_rows");
  const Tensor& yv = y.value();
  if (yv.rank() != 2 || b.value().rank() != 1 || b.value().dim(0) != yv.dim(1))
    throw DimensionError("add_bias_rows: incompatible shapes " + shape_str(yv.shape()) + " and " + shape_str(b.shape()));
  std::size_t B = yv.dim(0), O = yv.dim(1);
  Tensor out = yv;
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t j = 0; j < O; ++j) out[r * O + j] += b.value()[j];
  std::size_t iy = y.id(), ib = b.id();
  return t.record("add_bias_rows", std::move(out), {y, b}, [iy, ib, B, O](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(iy)) {
      auto& gy = tp.grad_buffer(iy);
      for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i];
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad_buffer(ib);
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t j = 0; j < O; ++j) gb[j] += g[r * O + j];
    }
  });
}

// x [B,C,H,W], k [O,C,K,K] -> [B,O,Ho,Wo]; zero padding.
inline Var conv2d(const Var& x, const Var& k, std::size_t stride, std::size_t pad) {
  Tape& t = impl::same_tape(x, k, "conv2d");
  const Tensor& xv = x.value();
  const Tensor& kv = k.value();
  if (xv.rank() != 4 || kv.rank() != 4) throw DimensionError("conv2d: expected rank-4 input and kernel");
  if (kv.dim(1) != xv.dim(1))
    throw DimensionError("conv2d: kernel expects " + std::to_string(kv.dim(1)) + " channels, input has " +
                         std::to_string(xv.dim(1)));
  if (kv.dim(2) != kv.dim(3)) throw DimensionError("conv2d: kernel must be square");
  std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  std::size_t O = kv.dim(0), K = kv.dim(2);
  std::size_t Ho = conv_out_size(H, K, stride, pad), Wo = conv_out_size(W, K, stride, pad);
  std::size_t CKK = C * K * K, P = Ho * Wo;
  Tensor y({B, O, Ho, Wo});
  std::vector<double> cols(CKK * P);
  impl::CMapR Km(kv.raw(), O, CKK);
  for (std::size_t b = 0; b < B; ++b) {
    impl::im2col(xv.raw() + b * C * H * W, C, H, W, K, stride, pad, Ho, Wo, cols.data());
    impl::MapR(y.raw() + b * O * P, O, P).noalias() = Km * impl::CMapR(cols.data(), CKK, P);
  }
  std::size_t ix = x.id(), ik = k.id();
  return t.record("conv2d", std::move(y), {x, k},
                  [=](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad(self);
                    const Tensor& xv2 = tp.value(ix);
                    impl::CMapR Km2(tp.value(ik).raw(), O, CKK);
                    bool gx = tp.requires_grad(ix), gk = tp.requires_grad(ik);
                    std::vector<double> buf(CKK * P);
                    for (std::size_t b = 0; b < B; ++b) {
                      impl::CMapR G(g.data() + b * O * P, O, P);
                      if (gk) {
                        impl::im2col(xv2.raw() + b * C * H * W, C, H, W, K, stride, pad, Ho, Wo, buf.data());
                        impl::MapR(tp.grad_buffer(ik).data(), O, CKK).noalias() +=
                            G * impl::CMapR(buf.data(), CKK, P).transpose();
                      }
                      if (gx) {
                        impl::MapR(buf.data(), CKK, P).noalias() = Km2.transpose() * G;
                        impl::col2im(buf.data(), C, H, W, K, stride, pad, Ho, Wo,
                                       tp.grad_buffer(ix).data() + b * C * H * W);
                      }
                    }
                  });
}

// y [B,O,H,W], b [O]
inline Var add_bias_channels(const Var& y, const Var& b) {
  Tape& t = impl::same_tape(y, b, "add_bias_channels");
  const Tensor& yv = y.value();
  if (yv.rank() != 4 || b.value().rank() != 1 || b.value().dim(0) != yv.dim(1))
    throw DimensionError("add_bias_channels: incompatible shapes " + shape_str(yv.shape()) + " and " +
                         shape_str(b.shape()));
  std::size_t B = yv.dim(0), O = yv.dim(1), P = yv.dim(2) * yv.dim(3);
  Tensor out = yv;
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t p = 0; p < P; ++p) out[(n * O + o) * P + p] += b.value()[o];
  std::size_t iy = y.id(), ib = b.id();
  return t.record("add_bias_channels", std::move(out), {y, b}, [iy, ib, B, O, P](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(iy)) {
      auto& gy = tp.grad_buffer(iy);
      for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i];
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad_buffer(ib);
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t p = 0; p < P; ++p) gb[o] += g[(n * O + o) * P + p];
    }
  });
}

// Per-output-row weight standardization: gain * (w - mean) / (std * sqrt(fan_in)).
inline Tensor standardize_value(const Tensor& w, double gain) {
  if (w.rank() < 2) throw DimensionError("standardize: weight must have rank >= 2");
  std::size_t O = w.dim(0), A = w.size() / O;
  Tensor y(w.shape());
  double sa = std::sqrt(static_cast<double>(A));
  for (std::size_t o = 0; o < O; ++o) {
    const double* r = w.raw() + o * A;
    double mu = 0.0;
    for (std::size_t j = 0; j < A; ++j) mu += r[j];
    mu /= static_cast<double>(A);
    double var = 0.0;
    for (std::size_t j = 0; j < A; ++j) var += (r[j] - mu) * (r[j] - mu);
    double s = std::sqrt(var / static_cast<double>(A));
    double den = s * sa + (s < 1e-12 ? 1e-6 : 0.0);
    for (std::size_t j = 0; j < A; ++j) y[o * A + j] = gain * (r[j] - mu) / den;
  }
  return y;
}

inline Var standardize(const Var& w, double gain) {
  Tensor y = standardize_value(w.value(), gain);
  std::size_t O = w.shape()[0], A = w.size() / O;
  std::size_t iw = w.id();
  return w.tape()->record("standardize", std::move(y), {w}, [iw, O, A, gain](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const Tensor& wv = tp.value(iw);
    auto& gw = tp.grad_buffer(iw);
    double sa = std::sqrt(static_cast<double>(A)), n = static_cast<double>(A);
    for (std::size_t o = 0; o < O; ++o) {
      const double* r = wv.raw() + o * A;
      const double* gr = g.data() + o * A;
      double mu = 0.0;
      for (std::size_t j = 0; j < A; ++j) mu += r[j];
      mu /= n;
      double var = 0.0;
      for (std::size_t j = 0; j < A; ++j) var += (r[j] - mu) * (r[j] - mu);
      double s = std::sqrt(var / n);
      double gm = 0.0;
      for (std::size_t j = 0; j < A; ++j) gm += gr[j];
      gm /= n;
      if (s < 1e-12) {
        double c = gain / (s * sa + 1e-6);
        for (std::size_t j = 0; j < A; ++j) gw[o * A + j] += c * (gr[j] - gm);
        continue;
      }
      double gx = 0.0;
      for (std::size_t j = 0; j < A; ++j) gx += gr[j] * (r[j] - mu) / s;
      gx /= n;
      double c = gain / (s * sa);
      for (std::size_t j = 0; j < A; ++j) gw[o * A + j] += c * (gr[j] - gm - (r[j] - mu) / s * gx);
    }
  });
}

}  // namespace ad

using ad::operator+;
using ad::operator-;
using ad::operator*;
using ad::operator/;

}  // namespace dde
