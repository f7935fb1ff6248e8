#include <cmath>

#include "doctest.h"
#include "imf/autodiff.hpp"
#include "imf/rng.hpp"
#include "test_util.hpp"

using namespace imf;
using namespace imf::testing;

namespace {

// Evaluate a Var-level function on plain tensors (no tangents, no tape).
Tensor eval(const std::function<Var(const Var&)>& f, const Tensor& x) { return f(Var(x)).value(); }

Var two_layer(const Var& x, const Var& w1, const Var& b1, const Var& w2, const Var& b2) {
  return matmul(tanh(matmul(x, w1) + b1), w2) + b2;
}

struct Primitive {
  const char* name;
  Shape shape;
  std::function<Var(const Var&)> f;
  double offset = 0.0;  // keeps sqrt away from zero
};

}  // namespace

TEST_CASE("jvp of elementwise square") {
  Tensor z({3}, {1, 2, 3});
  Tensor v({3}, {1, 1, 1});
  auto r = jvp([](std::span<const Var> in) { return in[0] * in[0]; }, std::span(&z, 1), std::span(&v, 1));
  CHECK(r.value == Tensor({3}, {1, 4, 9}));
  CHECK(r.tangent == Tensor({3}, {2, 4, 6}));
}

TEST_CASE("jvp of a linear map is independent of the point") {
  Rng rng(1);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor v = random_tensor(rng, {1, 3});
  Tensor expected = Var(v).value();
  auto f = [&](std::span<const Var> in) { return matmul(in[0], Var(a)); };
  Tensor av = matmul(Var(v), Var(a)).value();
  for (int trial = 0; trial < 3; ++trial) {
    Tensor z = random_tensor(rng, {1, 3});
    auto r = jvp(f, std::span(&z, 1), std::span(&v, 1));
    CHECK(max_abs_diff(r.tangent, av) < 1e-15);
  }
}

TEST_CASE("jvp of a random two-layer MLP matches central differences") {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    Var w1(random_tensor(rng, {5, 16}, 0.5)), b1(random_tensor(rng, {16}, 0.1));
    Var w2(random_tensor(rng, {16, 3}, 0.5)), b2(random_tensor(rng, {3}, 0.1));
    auto f = [&](const Var& x) { return two_layer(x, w1, b1, w2, b2); };
    Tensor z = random_tensor(rng, {4, 5});
    Tensor v = random_tensor(rng, {4, 5});
    auto r = jvp([&](std::span<const Var> in) { return f(in[0]); }, std::span(&z, 1), std::span(&v, 1));
    Tensor fd = fd_directional([&](const Tensor& x) { return eval(f, x); }, z, v, 1e-4);
    CHECK(rel_err(r.tangent, fd) < 1e-6);
    CHECK(r.value == eval(f, z));
  }
}

TEST_CASE("jvp rejects mismatched tangent shapes") {
  Tensor z({3}, {1, 2, 3});
  Tensor v({2}, {1, 1});
  CHECK_THROWS_AS(jvp([](std::span<const Var> in) { return in[0]; }, std::span(&z, 1), std::span(&v, 1)),
                  ContractViolation);
}

TEST_CASE("non-finite intermediates name the failing operation") {
  Var x(Tensor({2}, {-1.0, 4.0}));
  try {
    (void)sqrt(x);
    FAIL("expected NumericFailure");
  } catch (const NumericFailure& e) {
    CHECK(std::string(e.what()).find("sqrt") != std::string::npos);
  }
}

TEST_CASE("gradient of a quadratic") {
  ParamStore p{{"w", Tensor({2}, {1, -2})}};
  auto g = grad([](const VarMap& v) { return sum_all(v.at("w") * v.at("w")); }, p);
  CHECK(g.at("w") == Tensor({2}, {2, -4}));
}

TEST_CASE("gradient is exactly zero for unused parameters") {
  ParamStore p{{"a", Tensor({2}, {1, 2})}, {"b", Tensor({3}, {1, 2, 3})}};
  auto g = grad([](const VarMap& v) { return sum_all(square(v.at("a"))); }, p);
  CHECK(g.size() == p.size());
  CHECK(g.at("b") == Tensor::zeros({3}));
}

TEST_CASE("gradient requires a scalar loss") {
  ParamStore p{{"w", Tensor({2}, {1, 2})}};
  CHECK_THROWS_AS(grad([](const VarMap& v) { return v.at("w") * 2.0; }, p), ContractViolation);
}

TEST_CASE("gradients of a tiny MLP regression match central differences") {
  Rng rng(11);
  ParamStore p{{"w1", random_tensor(rng, {3, 8}, 0.6)},
               {"b1", random_tensor(rng, {8}, 0.1)},
               {"w2", random_tensor(rng, {8, 2}, 0.6)},
               {"b2", random_tensor(rng, {2}, 0.1)}};
  Tensor x = random_tensor(rng, {6, 3});
  Tensor y = random_tensor(rng, {6, 2});
  auto loss = [&](const VarMap& v) {
    Var pred = two_layer(Var(x), v.at("w1"), v.at("b1"), v.at("w2"), v.at("b2"));
    return mean_all(square(pred - Var(y)));
  };
  ParamStore g = grad(loss, p);
  for (const auto& [name, t] : p) {
    Tensor fd = fd_gradient(
        [&](const Tensor& probe) {
          ParamStore q = p;
          q.at(name) = probe;
          return loss(constants(q)).value().item();
        },
        t, 1e-5);
    CHECK_MESSAGE(max_entry_rel_err(g.at(name), fd) < 1e-5, name);
  }
}

TEST_CASE("stopgrad passes values and blocks both modes") {
  Rng rng(3);
  Tensor w = random_tensor(rng, {4});
  ParamStore p{{"w", w}};
  SUBCASE("value identity") { CHECK(stopgrad(Var(w)).value() == w); }
  SUBCASE("one branch blocked") {
    auto g = grad([](const VarMap& v) { return sum_all(v.at("w") * stopgrad(v.at("w"))); }, p);
    CHECK(g.at("w") == w);
  }
  SUBCASE("all blocked") {
    auto g = grad([](const VarMap& v) { return sum_all(stopgrad(v.at("w"))); }, p);
    CHECK(g.at("w") == Tensor::zeros({4}));
  }
  SUBCASE("tangent is exactly zero") {
    Tensor v = random_tensor(rng, {4});
    auto r = jvp([](std::span<const Var> in) { return stopgrad(in[0] * in[0]); }, std::span(&w, 1),
                 std::span(&v, 1));
    CHECK(r.tangent == Tensor::zeros({4}));
  }
}

TEST_CASE("every primitive: tangent and adjoint agree with central differences") {
  Rng rng(21);
  Var other(random_tensor(rng, {3, 4}));
  Var row(random_tensor(rng, {4}));
  Var mat(random_tensor(rng, {4, 5}));
  Var batch_mat(random_tensor(rng, {2, 4, 3}));
  const std::vector<Primitive> prims = {
      {"add", {3, 4}, [&](const Var& x) { return x + other; }},
      {"add_row", {3, 4}, [&](const Var& x) { return x + row; }},
      {"add_row_rev", {4}, [&](const Var& x) { return other + x; }},
      {"sub", {3, 4}, [&](const Var& x) { return other - x; }},
      {"mul", {3, 4}, [&](const Var& x) { return x * other; }},
      {"mul_self", {3, 4}, [&](const Var& x) { return x * x; }},
      {"div", {3, 4}, [&](const Var& x) { return other / (square(x) + 1.0); }},
      {"div_num", {3, 4}, [&](const Var& x) { return x / (square(other) + 1.0); }},
      {"neg_scale", {3, 4}, [&](const Var& x) { return -(x * 2.5) + 1.0; }},
      {"tanh", {3, 4}, [&](const Var& x) { return tanh(x); }},
      {"gelu", {3, 4}, [&](const Var& x) { return gelu(x); }},
      {"silu", {3, 4}, [&](const Var& x) { return silu(x); }},
      {"sqrt", {3, 4}, [&](const Var& x) { return sqrt(square(x) + 0.5); }},
      {"sin_cos", {3, 4}, [&](const Var& x) { return sin(x) * cos(x * 0.7); }},
      {"exp", {3, 4}, [&](const Var& x) { return exp(x * 0.3); }},
      {"matmul_left", {3, 4}, [&](const Var& x) { return matmul(x, mat); }},
      {"matmul_right", {4, 5}, [&](const Var& x) { return matmul(other, x); }},
      {"matmul_rank3", {2, 3, 4}, [&](const Var& x) { return matmul(x, mat); }},
      {"matmul_batched", {2, 5, 4}, [&](const Var& x) { return matmul(x, batch_mat); }},
      {"matmul_batched_rhs", {2, 3, 5}, [&](const Var& x) { return matmul(batch_mat, x); }},
      {"reshape", {3, 4}, [&](const Var& x) { return reshape(x, {2, 6}) * 1.5; }},
      {"permute", {2, 3, 4}, [&](const Var& x) { return permute(x, {2, 0, 1}) * 1.5; }},
      {"broadcast_to", {1, 4}, [&](const Var& x) { return broadcast_to(x, {3, 4}) * other; }},
      {"broadcast_col", {3, 1}, [&](const Var& x) { return x * other; }},
      {"concat", {3, 4}, [&](const Var& x) { return concat({x, other * x, x}, 1); }},
      {"concat0", {3, 4}, [&](const Var& x) { return concat({other, x * x}, 0); }},
      {"slice", {3, 4}, [&](const Var& x) { return slice(x * x, 1, 1, 3); }},
      {"take_rows", {3, 4}, [&](const Var& x) { return take_rows(x * x, {2, 0, 2, 1}); }},
      {"sum_axis", {3, 4}, [&](const Var& x) { return sum(x * x, 0); }},
      {"mean_axis", {3, 4}, [&](const Var& x) { return mean(x * other, 1, true); }},
      {"sum_all", {3, 4}, [&](const Var& x) { return sum_all(x * x); }},
      {"softmax", {3, 4}, [&](const Var& x) { return softmax(x); }},
      {"layer_norm", {3, 4}, [&](const Var& x) { return layer_norm(x); }},
  };
  for (const auto& p : prims) {
    CAPTURE(p.name);
    Tensor x = random_tensor(rng, p.shape);
    Tensor v = random_tensor(rng, p.shape);
    auto r = jvp([&](std::span<const Var> in) { return p.f(in[0]); }, std::span(&x, 1), std::span(&v, 1));
    Tensor fd = fd_directional([&](const Tensor& z) { return eval(p.f, z); }, x, v, 1e-5);
    CHECK(rel_err(r.tangent, fd) < 1e-7);

    Tensor w = random_tensor(rng, r.value.shape());
    ParamStore ps{{"x", x}};
    auto scalarize = [&](const VarMap& m) { return sum_all(p.f(m.at("x")) * Var(w)); };
    ParamStore g = grad(scalarize, ps);
    Tensor gfd = fd_gradient([&](const Tensor& z) { return scalarize(constants({{"x", z}})).value().item(); },
                             x, 1e-5);
    CHECK(rel_err(g.at("x"), gfd) < 1e-7);
  }
}

TEST_CASE("JVP is linear in the tangent") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Var w1(random_tensor(rng, {4, 6})), w2(random_tensor(rng, {6, 2}));
    auto f = [&](std::span<const Var> in) { return matmul(silu(layer_norm(matmul(in[0], w1))), w2); };
    Tensor x = random_tensor(rng, {3, 4});
    Tensor v1 = random_tensor(rng, {3, 4}), v2 = random_tensor(rng, {3, 4});
    const double a = rng.normal(), b = rng.normal();
    Tensor mix(v1.shape());
    for (std::size_t i = 0; i < mix.numel(); ++i) mix[i] = a * v1[i] + b * v2[i];
    auto r1 = jvp(f, std::span(&x, 1), std::span(&v1, 1));
    auto r2 = jvp(f, std::span(&x, 1), std::span(&v2, 1));
    auto rm = jvp(f, std::span(&x, 1), std::span(&mix, 1));
    Tensor combo(rm.tangent.shape());
    for (std::size_t i = 0; i < combo.numel(); ++i) combo[i] = a * r1.tangent[i] + b * r2.tangent[i];
    CHECK(rel_err(rm.tangent, combo) < 1e-13);
  }
}

TEST_CASE("forward and reverse modes agree on scalar functions") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Var w1(random_tensor(rng, {4, 6})), w2(random_tensor(rng, {6, 1}));
    auto f = [&](const Var& x) { return sum_all(tanh(matmul(gelu(matmul(x, w1)), w2))); };
    Tensor x = random_tensor(rng, {3, 4});
    Tensor v = random_tensor(rng, {3, 4});
    auto r = jvp([&](std::span<const Var> in) { return f(in[0]); }, std::span(&x, 1), std::span(&v, 1));
    ParamStore g = grad([&](const VarMap& m) { return f(m.at("x")); }, {{"x", x}});
    const double lhs = dot(g.at("x"), v);
    CHECK(std::abs(lhs - r.tangent.item()) <= 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("chain rule: staged JVP equals fused JVP") {
  Rng rng(13);
  Var w1(random_tensor(rng, {4, 5})), w2(random_tensor(rng, {5, 3}));
  auto inner = [&](const Var& x) { return tanh(matmul(x, w1)); };
  auto outer = [&](const Var& h) { return softmax(matmul(h, w2)); };
  Tensor x = random_tensor(rng, {2, 4});
  Tensor v = random_tensor(rng, {2, 4});
  auto fused = jvp([&](std::span<const Var> in) { return outer(inner(in[0])); }, std::span(&x, 1),
                   std::span(&v, 1));
  auto stage1 = jvp([&](std::span<const Var> in) { return inner(in[0]); }, std::span(&x, 1), std::span(&v, 1));
  auto stage2 = jvp([&](std::span<const Var> in) { return outer(in[0]); }, std::span(&stage1.value, 1),
                    std::span(&stage1.tangent, 1));
  CHECK(max_abs_diff(fused.tangent, stage2.tangent) < 1e-15);
}

TEST_CASE("tracked dual values: gradient flows through primal, tangent rides along") {
  Tape tape;
  Tensor w({2}, {0.5, -1.5});
  Var wv = tape.variable(w);
  Var z(Tensor({2}, {1.0, 2.0}), Tensor({2}, {1.0, 0.0}));
  Var y = wv * z * z;
  CHECK(y.tangent() == Tensor({2}, {2.0 * 0.5 * 1.0, 0.0}));
  Var loss = sum_all(y + stopgrad(Var(y.tangent())));
  auto g = tape.gradient(loss, std::span(&wv, 1));
  CHECK(g[0] == Tensor({2}, {1.0, 4.0}));
}

TEST_CASE("mixing tapes is a contract violation") {
  Tape a, b;
  Var x = a.variable(Tensor({1}, {1.0}));
  Var y = b.variable(Tensor({1}, {2.0}));
  CHECK_THROWS_AS(x + y, ContractViolation);
}

TEST_CASE("broadcast helpers") {
  CHECK(broadcast_shape({3, 1}, {4}) == Shape{3, 4});
  CHECK_THROWS_AS(broadcast_shape({3}, {4}), ContractViolation);
  Tensor g = Tensor::full({2, 3}, 1.0);
  CHECK(reduce_to(g, {3}) == Tensor({3}, {2, 2, 2}));
  CHECK(reduce_to(g, {2, 1}) == Tensor({2, 1}, {3, 3}));
  CHECK(expand(Tensor({2, 1}, {1, 2}), {2, 3}) == Tensor({2, 3}, {1, 1, 1, 2, 2, 2}));
}
