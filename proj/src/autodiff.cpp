#include "imf/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

namespace imf {

Var make_var(std::shared_ptr<const Tensor> value, std::shared_ptr<const Tensor> tangent, Tape* tape,
             std::size_t node) {
  Var v;
  v.value_ = std::move(value);
  v.tangent_ = std::move(tangent);
  v.tape_ = tape;
  v.node_ = node;
  return v;
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;
using Ptr = std::shared_ptr<const Tensor>;
using VjpFn = std::function<Tensor(std::size_t which, const Tensor& grad_out)>;

Ptr share(Tensor t) { return std::make_shared<const Tensor>(std::move(t)); }

void check_finite(std::string_view op, const Tensor& t, const char* what) {
  if (!t.all_finite()) {
    throw NumericFailure(std::string(op) + ": non-finite " + what);
  }
}

// Common tail of every primitive: finiteness check, tape recording when any
// input is tracked, and packaging into a Var.
Var finish(std::string_view op, Ptr value, std::optional<Tensor> tangent,
           const std::vector<const Var*>& inputs, VjpFn vjp) {
  check_finite(op, *value, "value");
  Ptr tan;
  if (tangent) {
    check_finite(op, *tangent, "tangent");
    tan = share(std::move(*tangent));
  }
  Tape* tape = nullptr;
  std::vector<std::size_t> parents;
  std::vector<std::size_t> which;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Var& in = *inputs[i];
    if (!in.tracked()) continue;
    if (tape && tape != in.tape()) {
      throw ContractViolation(std::string(op) + ": inputs recorded on different tapes");
    }
    tape = in.tape();
    parents.push_back(in.node());
    which.push_back(i);
  }
  if (!tape) return make_var(std::move(value), std::move(tan), nullptr, 0);
  auto node = tape->record(std::move(parents), value->shape(),
                           [vjp = std::move(vjp), which = std::move(which)](
                               const Tensor& g, std::vector<Tensor>& gin) {
                             for (std::size_t k = 0; k < which.size(); ++k) gin[k] = vjp(which[k], g);
                           });
  return make_var(std::move(value), std::move(tan), tape, node);
}

// op(A) is m x k, op(B) is k x n, C is m x n; all row-major.
void gemm(const double* a, bool ta, const double* b, bool tb, double* c, Eigen::Index m,
          Eigen::Index n, Eigen::Index k, bool accumulate) {
  MMap C(c, m, n);
  auto run = [&](const auto& A, const auto& B) {
    if (accumulate) {
      C.noalias() += A * B;
    } else {
      C.noalias() = A * B;
    }
  };
  if (!ta && !tb) {
    run(CMap(a, m, k), CMap(b, k, n));
  } else if (ta && !tb) {
    run(CMap(a, k, m).transpose(), CMap(b, k, n));
  } else if (!ta && tb) {
    run(CMap(a, m, k), CMap(b, n, k).transpose());
  } else {
    run(CMap(a, k, m).transpose(), CMap(b, n, k).transpose());
  }
}

// Strides of `in` laid out against the broadcast shape `out`; broadcast
// axes get stride zero.
std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> st(r, 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t oi = i + (r - in.size());
    st[oi] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  return st;
}

// True when `in` (ignoring leading ones) equals the trailing dims of `out`.
bool is_suffix(const Shape& in, const Shape& out) {
  std::size_t lead = 0;
  while (lead < in.size() && in[lead] == 1) ++lead;
  const std::size_t len = in.size() - lead;
  if (len > out.size()) return false;
  return std::equal(in.begin() + static_cast<std::ptrdiff_t>(lead), in.end(),
                    out.end() - static_cast<std::ptrdiff_t>(len));
}

template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F f) {
  const std::size_t n = shape_numel(out);
  const std::size_t r = out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <class F>
Tensor bmap(const Tensor& a, const Tensor& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor r(a.shape());
    for (std::size_t i = 0; i < r.numel(); ++i) r[i] = f(a[i], b[i]);
    return r;
  }
  Shape out = broadcast_shape(a.shape(), b.shape());
  Tensor r(out);
  const std::size_t n = r.numel();
  if (a.numel() == n && is_suffix(b.shape(), out)) {
    const std::size_t m = b.numel();
    for (std::size_t i = 0; i < n; ++i) r[i] = f(a[i], b[i % m]);
    return r;
  }
  if (b.numel() == n && is_suffix(a.shape(), out)) {
    const std::size_t m = a.numel();
    for (std::size_t i = 0; i < n; ++i) r[i] = f(a[i % m], b[i]);
    return r;
  }
  for_each_broadcast(out, aligned_strides(a.shape(), out), aligned_strides(b.shape(), out),
                     [&](std::size_t i, std::size_t ia, std::size_t ib) { r[i] = f(a[ia], b[ib]); });
  return r;
}

Tensor hadamard(const Tensor& a, const Tensor& b) { return bmap(a, b, std::multiplies<>()); }

void add_into(Tensor& acc, const Tensor& g) {
  for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += g[i];
}

// Tangent of a +/- b with missing tangents treated as zero.
std::optional<Tensor> sum_tangent(const Var& a, const Var& b, const Shape& out, double sign_b) {
  if (!a.has_tangent() && !b.has_tangent()) return std::nullopt;
  if (a.has_tangent() && b.has_tangent()) {
    return bmap(*a.tangent_ptr(), *b.tangent_ptr(),
                [sign_b](double x, double y) { return x + sign_b * y; });
  }
  if (a.has_tangent()) return expand(*a.tangent_ptr(), out);
  Tensor t = expand(*b.tangent_ptr(), out);
  if (sign_b < 0) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = -t[i];
  }
  return t;
}

template <class F, class D>
Var unary(std::string_view op, const Var& x, F f, D dfdx) {
  const Tensor& xv = x.value();
  Tensor yv(xv.shape());
  for (std::size_t i = 0; i < yv.numel(); ++i) yv[i] = f(xv[i]);
  Ptr y = share(std::move(yv));
  Ptr d;
  if (x.has_tangent() || x.tracked()) {
    Tensor dv(xv.shape());
    for (std::size_t i = 0; i < dv.numel(); ++i) dv[i] = dfdx(xv[i], (*y)[i]);
    d = share(std::move(dv));
  }
  std::optional<Tensor> t;
  if (x.has_tangent()) t = hadamard(*d, *x.tangent_ptr());
  return finish(op, y, std::move(t), {&x},
                [d](std::size_t, const Tensor& g) { return hadamard(g, *d); });
}

Tensor permute_tensor(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  Shape out(r);
  std::vector<std::size_t> in_strides(r, 1), st(r);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = in[axes[i]];
    st[i] = in_strides[axes[i]];
  }
  Tensor y(out);
  std::vector<std::size_t> zero(r, 0);
  for_each_broadcast(out, st, zero, [&](std::size_t i, std::size_t ia, std::size_t) { y[i] = x[ia]; });
  return y;
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

Tensor slice_tensor(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  Shape out = x.shape();
  out[axis] = end - begin;
  const AxisSplit a = split_axis(x.shape(), axis);
  Tensor y(out);
  const std::size_t chunk = (end - begin) * a.inner;
  for (std::size_t o = 0; o < a.outer; ++o) {
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>((o * a.len + begin) * a.inner), chunk,
                y.data().begin() + static_cast<std::ptrdiff_t>(o * chunk));
  }
  return y;
}

Tensor concat_tensors(const std::vector<const Tensor*>& parts, const Shape& out, std::size_t axis) {
  const AxisSplit a = split_axis(out, axis);
  Tensor y(out);
  std::size_t offset = 0;
  for (const Tensor* p : parts) {
    const std::size_t chunk = p->dim(axis) * a.inner;
    for (std::size_t o = 0; o < a.outer; ++o) {
      std::copy_n(p->data().begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  y.data().begin() + static_cast<std::ptrdiff_t>(o * a.len * a.inner + offset));
    }
    offset += chunk;
  }
  return y;
}

Tensor sum_axis(const Tensor& x, std::size_t axis, const Shape& out) {
  const AxisSplit a = split_axis(x.shape(), axis);
  Tensor y(out);
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t l = 0; l < a.len; ++l) {
      const double* src = x.data().data() + (o * a.len + l) * a.inner;
      double* dst = y.data().data() + o * a.inner;
      for (std::size_t i = 0; i < a.inner; ++i) dst[i] += src[i];
    }
  }
  return y;
}

Tensor spread_axis(const Tensor& g, const Shape& in, std::size_t axis) {
  const AxisSplit a = split_axis(in, axis);
  Tensor r(in);
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t l = 0; l < a.len; ++l) {
      std::copy_n(g.data().begin() + static_cast<std::ptrdiff_t>(o * a.inner), a.inner,
                  r.data().begin() + static_cast<std::ptrdiff_t>((o * a.len + l) * a.inner));
    }
  }
  return r;
}

}  // namespace

// ---------------------------------------------------------------- Var / Tape

Var::Var() : value_(share(Tensor::scalar(0.0))) {}

Var::Var(Tensor value) : value_(share(std::move(value))) {}

Var::Var(Tensor value, Tensor tangent) {
  if (value.shape() != tangent.shape()) {
    throw ContractViolation("tangent shape " + shape_str(tangent.shape()) +
                            " does not match value shape " + shape_str(value.shape()));
  }
  value_ = share(std::move(value));
  tangent_ = share(std::move(tangent));
}

Tensor Var::tangent() const { return tangent_ ? *tangent_ : Tensor::zeros(value_->shape()); }

Var Tape::variable(Tensor value) {
  auto node = record({}, value.shape(), nullptr);
  return make_var(share(std::move(value)), nullptr, this, node);
}

Var Tape::variable(Tensor value, Tensor tangent) {
  Var dual(std::move(value), std::move(tangent));
  auto node = record({}, dual.shape(), nullptr);
  return make_var(dual.value_ptr(), dual.tangent_ptr(), this, node);
}

std::size_t Tape::record(std::vector<std::size_t> parents, Shape shape, Backward backward) {
  nodes_.push_back(Node{std::move(parents), std::move(shape), std::move(backward)});
  return nodes_.size() - 1;
}

std::vector<Tensor> Tape::gradient(const Var& loss, std::span<const Var> wrt) const {
  if (loss.numel() != 1) {
    throw ContractViolation("gradient needs a one-element loss, got shape " +
                            shape_str(loss.shape()));
  }
  for (const Var& w : wrt) {
    if (w.tape() != this) throw ContractViolation("gradient requested for a variable not on this tape");
  }
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  if (loss.tape() != this) {
    // Loss does not depend on anything recorded here.
    for (const Var& w : wrt) out.push_back(Tensor::zeros(w.shape()));
    return out;
  }
  const std::size_t n = nodes_.size();
  std::vector<Tensor> g(n);
  std::vector<char> has(n, 0), keep(n, 0);
  for (const Var& w : wrt) keep[w.node()] = 1;
  g[loss.node()] = Tensor::full(loss.shape(), 1.0);
  has[loss.node()] = 1;
  for (std::size_t i = loss.node() + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!has[i] || !node.backward) continue;
    std::vector<Tensor> gin(node.parents.size());
    node.backward(g[i], gin);
    for (std::size_t k = 0; k < node.parents.size(); ++k) {
      const std::size_t p = node.parents[k];
      if (has[p]) {
        add_into(g[p], gin[k]);
      } else {
        g[p] = std::move(gin[k]);
        has[p] = 1;
      }
    }
    if (!keep[i]) {
      g[i] = Tensor();
      has[i] = 0;
    }
  }
  for (const Var& w : wrt) out.push_back(has[w.node()] ? g[w.node()] : Tensor::zeros(w.shape()));
  return out;
}

std::size_t total_numel(const ParamStore& store) {
  std::size_t n = 0;
  for (const auto& [name, t] : store) n += t.numel();
  return n;
}

// ---------------------------------------------------------------- broadcasting

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ContractViolation("shapes " + shape_str(a) + " and " + shape_str(b) +
                              " are not broadcast-compatible");
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

Tensor expand(const Tensor& t, const Shape& shape) {
  if (t.shape() == shape) return t;
  if (broadcast_shape(t.shape(), shape) != shape) {
    throw ContractViolation("cannot broadcast " + shape_str(t.shape()) + " to " + shape_str(shape));
  }
  Tensor r(shape);
  const std::size_t n = r.numel();
  if (is_suffix(t.shape(), shape)) {
    const std::size_t m = t.numel();
    for (std::size_t i = 0; i < n; ++i) r[i] = t[i % m];
    return r;
  }
  std::vector<std::size_t> zero(shape.size(), 0);
  for_each_broadcast(shape, aligned_strides(t.shape(), shape), zero,
                     [&](std::size_t i, std::size_t ia, std::size_t) { r[i] = t[ia]; });
  return r;
}

Tensor reduce_to(const Tensor& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  Tensor r(shape);
  const std::size_t n = g.numel();
  if (r.numel() == 1) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += g[i];
    r[0] = s;
    return r;
  }
  if (is_suffix(shape, g.shape())) {
    const std::size_t m = r.numel();
    for (std::size_t i = 0; i < n; ++i) r[i % m] += g[i];
    return r;
  }
  std::vector<std::size_t> zero(g.shape().size(), 0);
  for_each_broadcast(g.shape(), aligned_strides(shape, g.shape()), zero,
                     [&](std::size_t i, std::size_t ir, std::size_t) { r[ir] += g[i]; });
  return r;
}

// ---------------------------------------------------------------- arithmetic

Var add(const Var& a, const Var& b) {
  Ptr y = share(bmap(a.value(), b.value(), std::plus<>()));
  auto t = sum_tangent(a, b, y->shape(), 1.0);
  return finish("add", y, std::move(t), {&a, &b},
                [sa = a.shape(), sb = b.shape()](std::size_t w, const Tensor& g) {
                  return reduce_to(g, w == 0 ? sa : sb);
                });
}

Var sub(const Var& a, const Var& b) {
  Ptr y = share(bmap(a.value(), b.value(), std::minus<>()));
  auto t = sum_tangent(a, b, y->shape(), -1.0);
  return finish("sub", y, std::move(t), {&a, &b},
                [sa = a.shape(), sb = b.shape()](std::size_t w, const Tensor& g) {
                  if (w == 0) return reduce_to(g, sa);
                  Tensor r = reduce_to(g, sb);
                  for (std::size_t i = 0; i < r.numel(); ++i) r[i] = -r[i];
                  return r;
                });
}

Var mul(const Var& a, const Var& b) {
  Ptr av = a.value_ptr(), bv = b.value_ptr();
  Ptr y = share(hadamard(*av, *bv));
  std::optional<Tensor> t;
  if (a.has_tangent() && b.has_tangent()) {
    Tensor l = hadamard(*a.tangent_ptr(), *bv);
    Tensor r = hadamard(*av, *b.tangent_ptr());
    t = bmap(l, r, std::plus<>());
  } else if (a.has_tangent()) {
    t = expand(hadamard(*a.tangent_ptr(), *bv), y->shape());
  } else if (b.has_tangent()) {
    t = expand(hadamard(*av, *b.tangent_ptr()), y->shape());
  }
  return finish("mul", y, std::move(t), {&a, &b}, [av, bv](std::size_t w, const Tensor& g) {
    return w == 0 ? reduce_to(hadamard(g, *bv), av->shape()) : reduce_to(hadamard(g, *av), bv->shape());
  });
}

Var div(const Var& a, const Var& b) {
  Ptr av = a.value_ptr(), bv = b.value_ptr();
  Ptr y = share(bmap(*av, *bv, std::divides<>()));
  std::optional<Tensor> t;
  if (a.has_tangent() || b.has_tangent()) {
    // (ta - y * tb) / b
    Tensor num = a.has_tangent() ? expand(*a.tangent_ptr(), y->shape()) : Tensor(y->shape());
    if (b.has_tangent()) {
      Tensor ytb = hadamard(*y, *b.tangent_ptr());
      for (std::size_t i = 0; i < num.numel(); ++i) num[i] -= ytb[i];
    }
    t = bmap(num, *bv, std::divides<>());
  }
  return finish("div", y, std::move(t), {&a, &b}, [av, bv, y](std::size_t w, const Tensor& g) {
    if (w == 0) return reduce_to(bmap(g, *bv, std::divides<>()), av->shape());
    Tensor gy = hadamard(g, *y);
    Tensor r = bmap(gy, *bv, [](double p, double q) { return -p / q; });
    return reduce_to(r, bv->shape());
  });
}

Var neg(const Var& x) {
  auto flip = [](const Tensor& t) {
    Tensor r(t.shape());
    for (std::size_t i = 0; i < r.numel(); ++i) r[i] = -t[i];
    return r;
  };
  std::optional<Tensor> t;
  if (x.has_tangent()) t = flip(*x.tangent_ptr());
  return finish("neg", share(flip(x.value())), std::move(t), {&x},
                [flip](std::size_t, const Tensor& g) { return flip(g); });
}

Var scale(const Var& x, double c) {
  auto times = [c](const Tensor& t) {
    Tensor r(t.shape());
    for (std::size_t i = 0; i < r.numel(); ++i) r[i] = c * t[i];
    return r;
  };
  std::optional<Tensor> t;
  if (x.has_tangent()) t = times(*x.tangent_ptr());
  return finish("scale", share(times(x.value())), std::move(t), {&x},
                [times](std::size_t, const Tensor& g) { return times(g); });
}

Var add_scalar(const Var& x, double c) {
  Tensor y = x.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += c;
  std::optional<Tensor> t;
  if (x.has_tangent()) t = *x.tangent_ptr();
  return finish("add_scalar", share(std::move(y)), std::move(t), {&x},
                [](std::size_t, const Tensor& g) { return g; });
}

// ---------------------------------------------------------------- unary

Var tanh(const Var& x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Var gelu(const Var& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary("gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
               [](double v, double) {
                 const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                 return cdf + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
               });
}

Var silu(const Var& x) {
  return unary("silu", x, [](double v) { return v / (1.0 + std::exp(-v)); },
               [](double v, double) {
                 const double s = 1.0 / (1.0 + std::exp(-v));
                 return s * (1.0 + v * (1.0 - s));
               });
}

Var sqrt(const Var& x) {
  return unary("sqrt", x, [](double v) { return std::sqrt(v); },
               [](double, double y) { return 0.5 / y; });
}

Var sin(const Var& x) {
  return unary("sin", x, [](double v) { return std::sin(v); },
               [](double v, double) { return std::cos(v); });
}

Var cos(const Var& x) {
  return unary("cos", x, [](double v) { return std::cos(v); },
               [](double v, double) { return -std::sin(v); });
}

Var exp(const Var& x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var square(const Var& x) {
  return unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ---------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  Ptr av = a.value_ptr(), bv = b.value_ptr();
  using Idx = Eigen::Index;

  if (sb.size() == 2 && sa.size() >= 2) {
    const std::size_t k = sa.back();
    if (sb[0] != k) {
      throw ContractViolation("matmul: inner dims differ, " + shape_str(sa) + " x " + shape_str(sb));
    }
    const std::size_t n = sb[1];
    const std::size_t m = k == 0 ? 0 : av->numel() / k;
    Shape out = sa;
    out.back() = n;
    Tensor y(out);
    gemm(av->data().data(), false, bv->data().data(), false, y.data().data(), Idx(m), Idx(n), Idx(k), false);
    std::optional<Tensor> t;
    if (a.has_tangent() || b.has_tangent()) {
      Tensor tv(out);
      if (a.has_tangent()) {
        gemm(a.tangent_ptr()->data().data(), false, bv->data().data(), false, tv.data().data(), Idx(m),
             Idx(n), Idx(k), true);
      }
      if (b.has_tangent()) {
        gemm(av->data().data(), false, b.tangent_ptr()->data().data(), false, tv.data().data(), Idx(m),
             Idx(n), Idx(k), true);
      }
      t = std::move(tv);
    }
    return finish("matmul", share(std::move(y)), std::move(t), {&a, &b},
                  [av, bv, m, n, k](std::size_t w, const Tensor& g) {
                    if (w == 0) {
                      Tensor ga(av->shape());
                      gemm(g.data().data(), false, bv->data().data(), true, ga.data().data(), Idx(m),
                           Idx(k), Idx(n), false);
                      return ga;
                    }
                    Tensor gb(bv->shape());
                    gemm(av->data().data(), true, g.data().data(), false, gb.data().data(), Idx(k),
                         Idx(n), Idx(m), false);
                    return gb;
                  });
  }

  if (sa.size() == sb.size() && sa.size() >= 3 &&
      std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
    const std::size_t r = sa.size();
    const std::size_t m = sa[r - 2], k = sa[r - 1], n = sb[r - 1];
    if (sb[r - 2] != k) {
      throw ContractViolation("matmul: inner dims differ, " + shape_str(sa) + " x " + shape_str(sb));
    }
    std::size_t batch = 1;
    for (std::size_t i = 0; i + 2 < r; ++i) batch *= sa[i];
    Shape out = sa;
    out[r - 1] = n;
    auto batched = [batch](const double* x, bool tx, const double* z, bool tz, double* dst,
                                    std::size_t rows, std::size_t cols, std::size_t inner,
                                    std::size_t x_stride, std::size_t z_stride, bool acc) {
      for (std::size_t i = 0; i < batch; ++i) {
        gemm(x + i * x_stride, tx, z + i * z_stride, tz, dst + i * rows * cols, Idx(rows), Idx(cols),
             Idx(inner), acc);
      }
    };
    Tensor y(out);
    batched(av->data().data(), false, bv->data().data(), false, y.data().data(), m, n, k, m * k, k * n,
            false);
    std::optional<Tensor> t;
    if (a.has_tangent() || b.has_tangent()) {
      Tensor tv(out);
      if (a.has_tangent()) {
        batched(a.tangent_ptr()->data().data(), false, bv->data().data(), false, tv.data().data(), m, n,
                k, m * k, k * n, true);
      }
      if (b.has_tangent()) {
        batched(av->data().data(), false, b.tangent_ptr()->data().data(), false, tv.data().data(), m, n,
                k, m * k, k * n, true);
      }
      t = std::move(tv);
    }
    return finish("matmul", share(std::move(y)), std::move(t), {&a, &b},
                  [av, bv, batched, m, n, k](std::size_t w, const Tensor& g) {
                    if (w == 0) {
                      Tensor ga(av->shape());
                      batched(g.data().data(), false, bv->data().data(), true, ga.data().data(), m, k,
                              n, m * n, k * n, false);
                      return ga;
                    }
                    Tensor gb(bv->shape());
                    batched(av->data().data(), true, g.data().data(), false, gb.data().data(), k, n, m,
                            m * k, m * n, false);
                    return gb;
                  });
  }
  throw ContractViolation("matmul: unsupported shapes " + shape_str(sa) + " x " + shape_str(sb));
}

Var reshape(const Var& x, Shape shape) {
  Ptr y = share(x.value().reshaped(shape));
  std::optional<Tensor> t;
  if (x.has_tangent()) t = x.tangent_ptr()->reshaped(shape);
  return finish("reshape", y, std::move(t), {&x},
                [in = x.shape()](std::size_t, const Tensor& g) { return g.reshaped(in); });
}

Var permute(const Var& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.shape().size();
  std::vector<std::size_t> inverse(r, r);
  if (axes.size() != r) throw ContractViolation("permute: axes length does not match rank");
  for (std::size_t i = 0; i < r; ++i) {
    if (axes[i] >= r || inverse[axes[i]] != r) throw ContractViolation("permute: invalid axes");
    inverse[axes[i]] = i;
  }
  std::optional<Tensor> t;
  if (x.has_tangent()) t = permute_tensor(*x.tangent_ptr(), axes);
  return finish("permute", share(permute_tensor(x.value(), axes)), std::move(t), {&x},
                [inverse](std::size_t, const Tensor& g) { return permute_tensor(g, inverse); });
}

Var broadcast_to(const Var& x, const Shape& shape) {
  std::optional<Tensor> t;
  if (x.has_tangent()) t = expand(*x.tangent_ptr(), shape);
  return finish("broadcast_to", share(expand(x.value(), shape)), std::move(t), {&x},
                [in = x.shape()](std::size_t, const Tensor& g) { return reduce_to(g, in); });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractViolation("concat: no inputs");
  Shape out = parts[0].shape();
  if (axis >= out.size()) throw ContractViolation("concat: axis out of range");
  out[axis] = 0;
  bool any_tangent = false;
  std::vector<const Tensor*> values;
  std::vector<const Var*> inputs;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != out.size()) throw ContractViolation("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != out[i]) {
        throw ContractViolation("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(out));
      }
    }
    out[axis] += s[axis];
    values.push_back(&p.value());
    inputs.push_back(&p);
    any_tangent = any_tangent || p.has_tangent();
  }
  std::optional<Tensor> t;
  if (any_tangent) {
    std::vector<Tensor> zeros;
    zeros.reserve(parts.size());
    std::vector<const Tensor*> tans;
    for (const Var& p : parts) {
      if (p.has_tangent()) {
        tans.push_back(p.tangent_ptr().get());
      } else {
        zeros.push_back(Tensor::zeros(p.shape()));
        tans.push_back(&zeros.back());
      }
    }
    t = concat_tensors(tans, out, axis);
  }
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    offsets.push_back(off);
    off += p.shape()[axis];
  }
  std::vector<std::size_t> sizes;
  for (const Var& p : parts) sizes.push_back(p.shape()[axis]);
  return finish("concat", share(concat_tensors(values, out, axis)), std::move(t), inputs,
                [offsets, sizes, axis](std::size_t w, const Tensor& g) {
                  return slice_tensor(g, axis, offsets[w], offsets[w] + sizes[w]);
                });
}

Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) {
    throw ContractViolation("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                            ") invalid for shape " + shape_str(s));
  }
  std::optional<Tensor> t;
  if (x.has_tangent()) t = slice_tensor(*x.tangent_ptr(), axis, begin, end);
  return finish("slice", share(slice_tensor(x.value(), axis, begin, end)), std::move(t), {&x},
                [in = s, axis, begin, end](std::size_t, const Tensor& g) {
                  Tensor r(in);
                  const AxisSplit a = split_axis(in, axis);
                  const std::size_t chunk = (end - begin) * a.inner;
                  for (std::size_t o = 0; o < a.outer; ++o) {
                    std::copy_n(g.data().begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                                r.data().begin() +
                                    static_cast<std::ptrdiff_t>((o * a.len + begin) * a.inner));
                  }
                  return r;
                });
}

Var take_rows(const Var& table, const std::vector<std::size_t>& rows) {
  const Shape& s = table.shape();
  if (s.size() != 2) throw ContractViolation("take_rows: table must be 2-D");
  const std::size_t w = s[1];
  for (auto r : rows) {
    if (r >= s[0]) {
      throw ContractViolation("take_rows: row " + std::to_string(r) + " out of range for " +
                              std::to_string(s[0]) + " rows");
    }
  }
  auto gather = [rows, w](const Tensor& src) {
    Tensor y({rows.size(), w});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(src.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * w), w,
                  y.data().begin() + static_cast<std::ptrdiff_t>(i * w));
    }
    return y;
  };
  std::optional<Tensor> t;
  if (table.has_tangent()) t = gather(*table.tangent_ptr());
  return finish("take_rows", share(gather(table.value())), std::move(t), {&table},
                [rows, w, in = s](std::size_t, const Tensor& g) {
                  Tensor r(in);
                  for (std::size_t i = 0; i < rows.size(); ++i) {
                    for (std::size_t j = 0; j < w; ++j) r[rows[i] * w + j] += g[i * w + j];
                  }
                  return r;
                });
}

// ---------------------------------------------------------------- reductions

Var sum(const Var& x, std::size_t axis, bool keepdim) {
  const Shape& in = x.shape();
  if (axis >= in.size()) throw ContractViolation("sum: axis out of range");
  Shape kept = in;
  kept[axis] = 1;
  Shape out = in;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  std::optional<Tensor> t;
  if (x.has_tangent()) t = sum_axis(*x.tangent_ptr(), axis, out);
  return finish("sum", share(sum_axis(x.value(), axis, out)), std::move(t), {&x},
                [in, axis](std::size_t, const Tensor& g) { return spread_axis(g, in, axis); });
}

Var mean(const Var& x, std::size_t axis, bool keepdim) {
  const double len = static_cast<double>(x.shape().at(axis));
  return scale(sum(x, axis, keepdim), 1.0 / len);
}

Var sum_all(const Var& x) {
  auto total = [](const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v;
    return Tensor::scalar(s);
  };
  std::optional<Tensor> t;
  if (x.has_tangent()) t = total(*x.tangent_ptr());
  return finish("sum_all", share(total(x.value())), std::move(t), {&x},
                [in = x.shape()](std::size_t, const Tensor& g) { return Tensor::full(in, g.item()); });
}

Var mean_all(const Var& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------- normalization

Var softmax(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw ContractViolation("softmax: needs rank >= 1");
  const std::size_t len = xv.shape().back();
  const std::size_t rows = len == 0 ? 0 : xv.numel() / len;
  Tensor yv(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = xv.data().data() + r * len;
    double* dst = yv.data().data() + r * len;
    const double mx = *std::max_element(src, src + len);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) z += dst[i] = std::exp(src[i] - mx);
    for (std::size_t i = 0; i < len; ++i) dst[i] /= z;
  }
  Ptr y = share(std::move(yv));
  // J^T g = J g = y * (g - <g, y>) rowwise.
  auto apply = [y, rows, len](const Tensor& v) {
    Tensor r(v.shape());
    for (std::size_t row = 0; row < rows; ++row) {
      const double* yy = y->data().data() + row * len;
      const double* vv = v.data().data() + row * len;
      double dot = 0.0;
      for (std::size_t i = 0; i < len; ++i) dot += yy[i] * vv[i];
      for (std::size_t i = 0; i < len; ++i) r[row * len + i] = yy[i] * (vv[i] - dot);
    }
    return r;
  };
  std::optional<Tensor> t;
  if (x.has_tangent()) t = apply(*x.tangent_ptr());
  return finish("softmax", y, std::move(t), {&x}, [apply](std::size_t, const Tensor& g) { return apply(g); });
}

Var layer_norm(const Var& x, double eps) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw ContractViolation("layer_norm: needs rank >= 1");
  const std::size_t len = xv.shape().back();
  const std::size_t rows = len == 0 ? 0 : xv.numel() / len;
  Tensor xhat(xv.shape());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = xv.data().data() + r * len;
    double mu = 0.0;
    for (std::size_t i = 0; i < len; ++i) mu += src[i];
    mu /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t i = 0; i < len; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<double>(len);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < len; ++i) xhat[r * len + i] = (src[i] - mu) * rstd[r];
  }
  Ptr y = share(std::move(xhat));
  // The Jacobian is symmetric: rstd * (v - mean(v) - xhat * mean(v * xhat)).
  auto apply = [y, rstd = std::move(rstd), rows, len](const Tensor& v) {
    Tensor r(v.shape());
    const double inv = 1.0 / static_cast<double>(len);
    for (std::size_t row = 0; row < rows; ++row) {
      const double* yy = y->data().data() + row * len;
      const double* vv = v.data().data() + row * len;
      double mv = 0.0, myv = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        mv += vv[i];
        myv += yy[i] * vv[i];
      }
      mv *= inv;
      myv *= inv;
      for (std::size_t i = 0; i < len; ++i) r[row * len + i] = rstd[row] * (vv[i] - mv - yy[i] * myv);
    }
    return r;
  };
  std::optional<Tensor> t;
  if (x.has_tangent()) t = apply(*x.tangent_ptr());
  return finish("layer_norm", y, std::move(t), {&x},
                [apply](std::size_t, const Tensor& g) { return apply(g); });
}

Var stopgrad(const Var& x) { return make_var(x.value_ptr(), nullptr, nullptr, 0); }

// ---------------------------------------------------------------- functional API

JvpResult jvp(const std::function<Var(std::span<const Var>)>& f, std::span<const Tensor> inputs,
              std::span<const Tensor> tangents) {
  if (inputs.size() != tangents.size()) {
    throw ContractViolation("jvp: " + std::to_string(inputs.size()) + " inputs but " +
                            std::to_string(tangents.size()) + " tangents");
  }
  std::vector<Var> duals;
  duals.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) duals.emplace_back(inputs[i], tangents[i]);
  Var out = f(duals);
  return {out.value(), out.tangent()};
}

VarMap constants(const ParamStore& params) {
  VarMap vars;
  for (const auto& [name, t] : params) vars.emplace(name, Var(t));
  return vars;
}

VarMap watch(Tape& tape, const ParamStore& params) {
  VarMap vars;
  for (const auto& [name, t] : params) vars.emplace(name, tape.variable(t));
  return vars;
}

ParamStore gradients(const Tape& tape, const Var& loss, const VarMap& vars) {
  std::vector<Var> wrt;
  wrt.reserve(vars.size());
  for (const auto& [name, v] : vars) wrt.push_back(v);
  auto gs = tape.gradient(loss, wrt);
  ParamStore out;
  std::size_t i = 0;
  for (const auto& [name, v] : vars) out.emplace(name, std::move(gs[i++]));
  return out;
}

ParamStore grad(const std::function<Var(const VarMap&)>& loss_fn, const ParamStore& params) {
  Tape tape;
  VarMap vars = watch(tape, params);
  Var loss = loss_fn(vars);
  return gradients(tape, loss, vars);
}

}  // namespace imf
