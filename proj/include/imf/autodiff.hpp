#pragma once

// Dense tensor operations with two differentiation modes:
//
//  * forward mode: every Var may carry a tangent; each primitive propagates
//    it alongside the primal value (dual arithmetic, no replay);
//  * reverse mode: primitives applied to Vars that live on a Tape are
//    recorded, and Tape::gradient sweeps the record backwards.
//
// Tangents are plain values and are never recorded on a tape, so a JVP
// output used inside a loss behaves as if wrapped in stopgrad. That is the
// only form of nested (reverse-over-forward) differentiation supported.

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "imf/tensor.hpp"

namespace imf {

class Tape;

class Var {
 public:
  Var();
  explicit Var(Tensor value);
  /// Untracked dual value. Shapes of value and tangent must match.
  Var(Tensor value, Tensor tangent);

  const Tensor& value() const { return *value_; }
  const Shape& shape() const { return value_->shape(); }
  std::size_t numel() const { return value_->numel(); }

  bool has_tangent() const { return tangent_ != nullptr; }
  /// Tangent, or zeros of the value's shape when none is attached.
  Tensor tangent() const;
  const std::shared_ptr<const Tensor>& tangent_ptr() const { return tangent_; }
  const std::shared_ptr<const Tensor>& value_ptr() const { return value_; }

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t node() const { return node_; }

 private:
  friend class Tape;
  friend Var make_var(std::shared_ptr<const Tensor>, std::shared_ptr<const Tensor>, Tape*,
                      std::size_t);

  std::shared_ptr<const Tensor> value_;
  std::shared_ptr<const Tensor> tangent_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

/// Dynamically recorded reverse-mode tape. Confined to one thread; distinct
/// tapes may be used concurrently.
class Tape {
 public:
  /// Computes the gradient contribution for one recorded parent.
  using Backward = std::function<void(const Tensor& grad_out, std::vector<Tensor>& grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf variable whose gradient may be requested.
  Var variable(Tensor value);
  Var variable(Tensor value, Tensor tangent);

  /// Reverse sweep from a one-element loss. Returns one gradient per entry
  /// of `wrt`, zeros where the loss does not depend on it.
  std::vector<Tensor> gradient(const Var& loss, std::span<const Var> wrt) const;

  std::size_t size() const { return nodes_.size(); }

  std::size_t record(std::vector<std::size_t> parents, Shape shape, Backward backward);

 private:
  struct Node {
    std::vector<std::size_t> parents;
    Shape shape;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

using ParamStore = std::map<std::string, Tensor>;
using VarMap = std::map<std::string, Var>;

std::size_t total_numel(const ParamStore& store);

// ---- elementwise arithmetic (numpy broadcasting) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& x);
Var scale(const Var& x, double c);
Var add_scalar(const Var& x, double c);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& x) { return neg(x); }
inline Var operator*(const Var& x, double c) { return scale(x, c); }
inline Var operator*(double c, const Var& x) { return scale(x, c); }
inline Var operator+(const Var& x, double c) { return add_scalar(x, c); }
inline Var operator-(const Var& x, double c) { return add_scalar(x, -c); }

// ---- unary nonlinearities ----
Var tanh(const Var& x);
Var gelu(const Var& x);
Var silu(const Var& x);
Var sqrt(const Var& x);
Var sin(const Var& x);
Var cos(const Var& x);
Var exp(const Var& x);
Var square(const Var& x);

// ---- linear algebra and structure ----
/// [..., m, k] x [k, n] -> [..., n], or batched [B..., m, k] x [B..., k, n].
Var matmul(const Var& a, const Var& b);
Var reshape(const Var& x, Shape shape);
Var permute(const Var& x, const std::vector<std::size_t>& axes);
Var broadcast_to(const Var& x, const Shape& shape);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end);
/// Rows of a 2-D table gathered by index.
Var take_rows(const Var& table, const std::vector<std::size_t>& rows);

// ---- reductions ----
Var sum(const Var& x, std::size_t axis, bool keepdim = false);
Var mean(const Var& x, std::size_t axis, bool keepdim = false);
Var sum_all(const Var& x);
Var mean_all(const Var& x);

// ---- normalization ----
Var softmax(const Var& x);  // over the last axis
Var layer_norm(const Var& x, double eps = 1e-6);  // over the last axis, no affine

/// Identity on values; zero adjoint and zero tangent.
Var stopgrad(const Var& x);

// ---- functional entry points ----
struct JvpResult {
  Tensor value;
  Tensor tangent;
};

/// Forward-mode Jacobian-vector product of f at `inputs` along `tangents`.
JvpResult jvp(const std::function<Var(std::span<const Var>)>& f, std::span<const Tensor> inputs,
              std::span<const Tensor> tangents);

/// Reverse-mode gradient of a scalar loss with respect to every parameter.
ParamStore grad(const std::function<Var(const VarMap&)>& loss_fn, const ParamStore& params);

/// Wraps every tensor of a store as an untracked constant.
VarMap constants(const ParamStore& params);
/// Registers every tensor of a store as a leaf on `tape`.
VarMap watch(Tape& tape, const ParamStore& params);
ParamStore gradients(const Tape& tape, const Var& loss, const VarMap& vars);

// Broadcasting helpers, exposed for tests and kernels.
Shape broadcast_shape(const Shape& a, const Shape& b);
Tensor expand(const Tensor& t, const Shape& shape);
Tensor reduce_to(const Tensor& g, const Shape& shape);

}  // namespace imf
