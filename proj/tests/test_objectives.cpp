#include <cmath>

#include "doctest.h"
#include "imf/objectives.hpp"
#include "imf/optim.hpp"
#include "test_util.hpp"

using namespace imf;
using namespace imf::testing;

namespace {

NetConfig tiny_net(int variant) {
  NetConfig c;
  if (variant % 2 == 0) {
    c.arch = Arch::mlp;
    c.depth = 2;
    c.width = 8;
    c.data_dim = 2;
  } else {
    c.arch = Arch::transformer;
    c.depth = 2;
    c.width = 8;
    c.heads = 2;
    c.data_dim = 2;
    c.tokens = {1, 1, 1, 1};
    c.conditioning = variant % 4 == 1 ? ConditioningMode::in_context : ConditioningMode::adaln_zero;
  }
  c.embed_dim = 8;
  c.mlp_ratio = 2;
  c.num_classes = 3;
  return c;
}

ParamStore live_params(const NetConfig& cfg, std::uint64_t seed) {
  ParamStore p = init_params(cfg, seed);
  Rng rng(seed, 5);
  for (auto& [name, t] : p) {
    for (double& v : t.data()) v += 0.2 * rng.normal();
  }
  return p;
}

Batch random_batch(Rng& rng, std::size_t n, std::size_t d, int num_classes) {
  Batch b{random_tensor(rng, {n, d}), random_tensor(rng, {n, d}), std::nullopt};
  if (num_classes > 0) {
    std::vector<int> labels(n);
    for (int& l : labels) l = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes)));
    b.labels = labels;
  }
  return b;
}

Tensor target_of(const Batch& b) {
  Tensor v(b.x.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = b.e[i] - b.x[i];
  return v;
}

Field constant_field(const Tensor& value) {
  return [value](const VarMap&, const Var&, const CondBatch&) { return Var(value); };
}

double max_abs_grad_diff(const ParamStore& a, const ParamStore& b) {
  double m = 0.0;
  for (const auto& [name, t] : a) m = std::max(m, max_abs_diff(t, b.at(name)));
  return m;
}

}  // namespace

TEST_CASE("sample_t_r ordering and r != t ratio") {
  Rng rng(1);
  const std::size_t n = 100000;
  TimePairs tr = sample_t_r(rng, n, {});
  std::size_t neq = 0;
  for (std::size_t i = 0; i < n; ++i) {
    REQUIRE(tr.r[i] > 0.0);
    REQUIRE(tr.r[i] <= tr.t[i]);
    REQUIRE(tr.t[i] < 1.0);
    neq += tr.r[i] != tr.t[i];
  }
  CHECK(std::abs(static_cast<double>(neq) / n - 0.5) < 0.01);
}

TEST_CASE("logit-normal mean matches quadrature") {
  // E[sigmoid(mu + sigma X)], X ~ N(0, 1), by composite Simpson on [-12, 12].
  const double mu = -0.4, sigma = 1.0;
  const int k = 20000;
  const double a = -12.0, h = 24.0 / k;
  double acc = 0.0;
  for (int i = 0; i <= k; ++i) {
    const double x = a + i * h;
    const double f = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI) / (1.0 + std::exp(-(mu + sigma * x)));
    acc += f * (i == 0 || i == k ? 1.0 : (i % 2 ? 4.0 : 2.0));
  }
  const double expected = acc * h / 3.0;
  // With ratio 1 every pair keeps both draws, and t + r is their sum.
  Rng rng(2);
  TimeSamplerConfig cfg;
  cfg.ratio_r_neq_t = 1.0;
  TimePairs tr = sample_t_r(rng, 500000, cfg);
  double s = 0.0;
  for (std::size_t i = 0; i < tr.t.numel(); ++i) s += tr.t[i] + tr.r[i];
  CHECK(std::abs(s / 1e6 - expected) < 1e-3);
}

TEST_CASE("interpolate endpoints and midpoint") {
  Rng rng(3);
  Tensor x = random_tensor(rng, {4, 2}), e = random_tensor(rng, {4, 2});
  CHECK(interpolate(x, e, Tensor::zeros({4})) == x);
  CHECK(interpolate(x, e, Tensor::full({4}, 1.0)) == e);
  CHECK(interpolate(Tensor({1, 1}, {2.0}), Tensor({1, 1}, {0.0}), Tensor({1}, {0.5})) == Tensor({1, 1}, {1.0}));
}

TEST_CASE("fm_loss with stubbed predictors") {
  Rng rng(4);
  Batch b = random_batch(rng, 6, 2, 0);
  TimePairs tr = sample_t_r(rng, 6, {});
  CondBatch c = unguided_cond(b, tr.t, tr.r);
  AdaptiveWeight plain{0.0, 1e-3};
  Model perfect{constant_field(target_of(b)), {}};
  CHECK(fm_loss(perfect, {}, b, c, VMode::boundary, plain).total == 0.0);
  Model zero{constant_field(Tensor({6, 2})), {}};
  LossReport rep = fm_loss(zero, {}, b, c, VMode::boundary, plain);
  Tensor v = target_of(b);
  double mean = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    const double expect = v[2 * i] * v[2 * i] + v[2 * i + 1] * v[2 * i + 1];
    CHECK(rep.per_sample[i] == doctest::Approx(expect).epsilon(1e-15));
    mean += expect / 6.0;
  }
  CHECK(rep.total == doctest::Approx(mean).epsilon(1e-14));
}

TEST_CASE("mf_loss with a constant stub has zero JVP term") {
  Rng rng(5);
  Batch b = random_batch(rng, 5, 2, 0);
  TimePairs tr = sample_t_r(rng, 5, {});
  Model perfect{constant_field(target_of(b)), {}};
  CHECK(mf_loss(perfect, {}, b, unguided_cond(b, tr.t, tr.r), {}).total == 0.0);
}

TEST_CASE("every objective collapses to FM at r = t") {
  Rng rng(6);
  for (int variant = 0; variant < 4; ++variant) {
    NetConfig cfg = tiny_net(variant);
    cfg.aux_head_depth = 1;
    ParamStore p = live_params(cfg, 10 + variant);
    Model m = make_model(cfg);
    VarMap vars = constants(p);
    Batch b = random_batch(rng, 4, 2, 3);
    TimePairs tr = sample_t_r(rng, 4, {});
    CondBatch c = unguided_cond(b, tr.t, tr.t);
    LossReport fm = fm_loss(m, vars, b, c, VMode::boundary, {});
    for (Objective obj : {Objective::mf, Objective::v_loss, Objective::imf_boundary}) {
      LossReport rep = objective_loss(obj, m, vars, b, c, {});
      CHECK(max_abs_diff(rep.per_sample, fm.per_sample) == 0.0);
      CHECK(rep.total == fm.total);
      for (bool neq : rep.mask_r_neq_t) CHECK_FALSE(neq);
    }
    // aux-head mode: main term is FM on u, plus the aux FM term
    LossReport aux = imf_loss(m, vars, b, c, VMode::aux_head, {});
    CHECK(max_abs_diff(aux.per_sample, fm.per_sample) == 0.0);
    CHECK(aux.total == doctest::Approx(fm.total + aux.aux_total).epsilon(1e-14));
  }
}

TEST_CASE("scalar identity behind the reparameterisation") {
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.normal(), j = rng.normal(), c = rng.normal(), tau = rng.uniform();
    const double lhs = (u - (c - tau * j)) * (u - (c - tau * j));
    const double rhs = ((u + tau * j) - c) * ((u + tau * j) - c);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("MF and the V-loss agree in value and gradient") {
  Rng rng(8);
  double worst_val = 0.0, worst_grad = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    NetConfig cfg = tiny_net(inst);
    ParamStore p = live_params(cfg, 1000 + inst);
    Model m = make_model(cfg);
    Batch b = random_batch(rng, 3, 2, 3);
    TimePairs tr = sample_t_r(rng, 3, {});
    CondBatch c = unguided_cond(b, tr.t, tr.r);
    AdaptiveWeight aw{inst % 3 == 0 ? 0.0 : 1.0, 1e-3};
    const LossReport a = mf_loss(m, constants(p), b, c, aw);
    const LossReport v = v_loss_mf_reparam(m, constants(p), b, c, aw);
    worst_val = std::max(worst_val, std::abs(a.total - v.total) / std::abs(v.total));
    ParamStore ga = grad([&](const VarMap& q) { return mf_loss(m, q, b, c, aw).objective; }, p);
    ParamStore gv = grad([&](const VarMap& q) { return v_loss_mf_reparam(m, q, b, c, aw).objective; }, p);
    worst_grad = std::max(worst_grad, max_abs_grad_diff(ga, gv));
  }
  MESSAGE("max rel value diff " << worst_val << ", max abs grad diff " << worst_grad);
  CHECK(worst_val < 1e-12);
  CHECK(worst_grad < 1e-10);
}

TEST_CASE("iMF with the conditional velocity as tangent is the V-loss") {
  Rng rng(9);
  NetConfig cfg = tiny_net(1);
  ParamStore p = live_params(cfg, 3);
  Batch b = random_batch(rng, 5, 2, 3);
  TimePairs tr = sample_t_r(rng, 5, {});
  CondBatch c = unguided_cond(b, tr.t, tr.r);
  Model m = make_model(cfg);
  m.v_aux = constant_field(target_of(b));
  LossReport imf = imf_loss(m, constants(p), b, c, VMode::aux_head, {});
  LossReport vl = v_loss_mf_reparam(m, constants(p), b, c, {});
  CHECK(imf.per_sample == vl.per_sample);
  CHECK(imf.aux_total == 0.0);
  CHECK(imf.total == vl.total);
}

TEST_CASE("boundary-mode iMF ignores aux-head parameters") {
  Rng rng(10);
  NetConfig cfg = tiny_net(1);
  cfg.aux_head_depth = 1;
  ParamStore p = live_params(cfg, 4);
  ParamStore q = p;
  for (auto& [name, t] : q) {
    if (is_aux_param(name)) {
      for (double& v : t.data()) v += 1.0;
    }
  }
  Batch b = random_batch(rng, 4, 2, 3);
  TimePairs tr = sample_t_r(rng, 4, {});
  CondBatch c = unguided_cond(b, tr.t, tr.r);
  Model m = make_model(cfg);
  LossReport a = imf_loss(m, constants(p), b, c, VMode::boundary, {});
  LossReport bq = imf_loss(m, constants(q), b, c, VMode::boundary, {});
  CHECK(a.per_sample == bq.per_sample);
  LossReport ax = imf_loss(m, constants(p), b, c, VMode::aux_head, {});
  LossReport bx = imf_loss(m, constants(q), b, c, VMode::aux_head, {});
  CHECK(ax.total != bx.total);
}

TEST_CASE("iMF boundary tangent is the model's own boundary velocity") {
  Rng rng(11);
  NetConfig cfg = tiny_net(0);
  ParamStore p = live_params(cfg, 6);
  Batch b = random_batch(rng, 4, 2, 3);
  TimePairs tr = sample_t_r(rng, 4, {});
  CondBatch c = unguided_cond(b, tr.t, tr.r);
  Model m = make_model(cfg);
  VarMap vars = constants(p);
  Tensor z = interpolate(b.x, b.e, tr.t);
  Tensor v = forward_v_boundary(cfg, vars, Var(z), c).value();
  Var u = dual_u(m.u, vars, z, v, c);
  Tensor expect({4});
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < 2; ++k) {
      const double V = u.value()[2 * i + k] + (tr.t[i] - tr.r[i]) * u.tangent()[2 * i + k];
      const double err = V - (b.e[2 * i + k] - b.x[2 * i + k]);
      s += err * err;
    }
    expect[i] = s;
  }
  CHECK(imf_loss(m, vars, b, c, VMode::boundary, {}).per_sample == expect);
}

TEST_CASE("dual pass tangent matches finite differences of the network") {
  Rng rng(12);
  NetConfig cfg = tiny_net(1);
  ParamStore p = live_params(cfg, 9);
  VarMap vars = constants(p);
  Model m = make_model(cfg);
  Batch b = random_batch(rng, 3, 2, 3);
  TimePairs tr = sample_t_r(rng, 3, {});
  CondBatch c = unguided_cond(b, tr.t, tr.r);
  Tensor z = interpolate(b.x, b.e, tr.t);
  Tensor v = random_tensor(rng, {3, 2});
  Var u = dual_u(m.u, vars, z, v, c);
  const double h = 1e-5;
  auto at = [&](double s) {
    Tensor zs = z, ts = tr.t;
    for (std::size_t i = 0; i < zs.numel(); ++i) zs[i] += s * v[i];
    for (std::size_t i = 0; i < ts.numel(); ++i) ts[i] += s;
    return m.u(vars, Var(zs), unguided_cond(b, ts, tr.r)).value();
  };
  Tensor fp = at(h), fm = at(-h), fd(fp.shape());
  for (std::size_t i = 0; i < fd.numel(); ++i) fd[i] = (fp[i] - fm[i]) / (2 * h);
  CHECK(rel_err(u.tangent(), fd) < 1e-6);
}

TEST_CASE("adaptive weight") {
  Rng rng(13);
  Tensor err = random_tensor(rng, {5, 3});
  WeightedLoss plain = adaptive_weight(Var(err), {0.0, 1e-3});
  double mean = 0.0;
  for (double v : err.data()) mean += v * v;
  CHECK(plain.total.value().item() == doctest::Approx(mean / 5.0).epsilon(1e-15));
  CHECK_THROWS_AS(adaptive_weight(Var(err), {1.0, 0.0}), ContractViolation);
  CHECK_THROWS_AS(adaptive_weight(Var(err), {1.0, -1.0}), ContractViolation);

  SUBCASE("gradient treats weights as constants") {
    Tensor x = random_tensor(rng, {6, 3}), y = random_tensor(rng, {6, 2});
    ParamStore p{{"w", random_tensor(rng, {3, 2})}};
    const AdaptiveWeight aw{1.0, 1e-3};
    auto residual = [&](const Tensor& w) {
      Tensor r({6, 2});
      for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t k = 0; k < 2; ++k) {
          double s = -y[i * 2 + k];
          for (std::size_t j = 0; j < 3; ++j) s += x[i * 3 + j] * w[j * 2 + k];
          r[i * 2 + k] = s;
        }
      }
      return r;
    };
    Tensor r0 = residual(p.at("w"));
    std::vector<double> frozen(6);
    for (std::size_t i = 0; i < 6; ++i) {
      frozen[i] = 1.0 / (r0[2 * i] * r0[2 * i] + r0[2 * i + 1] * r0[2 * i + 1] + aw.c);
    }
    auto frozen_loss = [&](const Tensor& w) {
      Tensor r = residual(w);
      double s = 0.0;
      for (std::size_t i = 0; i < 6; ++i) s += frozen[i] * (r[2 * i] * r[2 * i] + r[2 * i + 1] * r[2 * i + 1]);
      return s / 6.0;
    };
    ParamStore g = grad(
        [&](const VarMap& v) { return adaptive_weight(matmul(Var(x), v.at("w")) - Var(y), aw).total; }, p);
    CHECK(rel_err(g.at("w"), fd_gradient(frozen_loss, p.at("w"), 1e-6)) < 1e-5);
  }
}

TEST_CASE("equal per-sample errors give proportional gradients") {
  // ||a - b_i|| is 1 for every row at a = 0.
  ParamStore p{{"a", Tensor({1, 2}, {0.0, 0.0})}};
  Tensor b({4, 2}, {1, 0, 0, 1, -1, 0, 0, -1});
  auto g = [&](double pw) {
    return grad([&](const VarMap& v) { return adaptive_weight(v.at("a") - Var(b), {pw, 1e-3}).total; }, p).at("a");
  };
  Tensor g0 = g(0.0), g1 = g(1.0);
  const double w = 1.0 / (1.0 + 1e-3);
  for (std::size_t i = 0; i < 2; ++i) CHECK(g1[i] == doctest::Approx(w * g0[i]).epsilon(1e-14));
}

TEST_CASE("loss reports are deterministic") {
  Rng r1(15), r2(15);
  NetConfig cfg = tiny_net(1);
  ParamStore p = live_params(cfg, 2);
  Model m = make_model(cfg);
  auto run = [&](Rng& rng) {
    Batch b = random_batch(rng, 4, 2, 3);
    TimePairs tr = sample_t_r(rng, 4, {});
    return imf_loss(m, constants(p), b, unguided_cond(b, tr.t, tr.r), VMode::boundary, {});
  };
  LossReport a = run(r1), b = run(r2);
  CHECK(a.total == b.total);
  CHECK(a.per_sample == b.per_sample);
  CHECK(a.mask_r_neq_t == b.mask_r_neq_t);
}

TEST_CASE("Adam matches a hand-stepped recurrence") {
  // L(theta) = sum_i k_i (theta_i - a_i)^2
  const std::vector<double> k{1.0, 3.0, 0.5}, a{1.0, -2.0, 0.25};
  ParamStore p{{"theta", Tensor({3}, {0.0, 0.5, -1.0})}};
  OptimizerConfig cfg;
  cfg.lr = 0.05;
  cfg.warmup_steps = 3;
  cfg.ema_decay = 0.9;
  OptState st = init_opt_state(p);
  auto loss = [&](const VarMap& v) {
    LossReport rep;
    rep.objective = sum_all(Var(Tensor({3}, {k[0], k[1], k[2]})) * square(v.at("theta") - Var(Tensor({3}, {a[0], a[1], a[2]}))));
    rep.total = rep.objective.value().item();
    return rep;
  };
  std::vector<double> th{0.0, 0.5, -1.0}, m(3, 0.0), v(3, 0.0), ema = th;
  for (int step = 0; step < 10; ++step) {
    REQUIRE(train_step(p, st, loss, cfg).applied);
    const double lr = step < 3 ? 0.05 * (step + 1) / 3.0 : 0.05;
    const double c1 = 1.0 - std::pow(0.9, step + 1), c2 = 1.0 - std::pow(0.95, step + 1);
    for (int i = 0; i < 3; ++i) {
      const double g = 2.0 * k[i] * (th[i] - a[i]);
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.95 * v[i] + 0.05 * g * g;
      th[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + 1e-8);
      ema[i] = 0.9 * ema[i] + 0.1 * th[i];
    }
    for (int i = 0; i < 3; ++i) {
      CHECK(std::abs(p.at("theta")[i] - th[i]) < 1e-12);
      CHECK(std::abs(st.ema.at("theta")[i] - ema[i]) < 1e-12);
    }
  }
  CHECK(st.step == 10);
}

TEST_CASE("optimizer edge cases") {
  Rng rng(16);
  NetConfig cfg = tiny_net(0);
  ParamStore p = live_params(cfg, 1);
  Model m = make_model(cfg);
  Batch b = random_batch(rng, 4, 2, 3);
  TimePairs tr = sample_t_r(rng, 4, {});
  CondBatch c = unguided_cond(b, tr.t, tr.r);
  auto loss = [&](const VarMap& v) { return imf_loss(m, v, b, c, VMode::boundary, {}); };

  SUBCASE("lr = 0 leaves params unchanged") {
    OptimizerConfig oc;
    oc.lr = 0.0;
    OptState st = init_opt_state(p);
    ParamStore q = p;
    REQUIRE(train_step(q, st, loss, oc).applied);
    CHECK(q == p);
  }
  SUBCASE("EMA decay 0 tracks params") {
    OptimizerConfig oc;
    oc.lr = 1e-2;
    oc.ema_decay = 0.0;
    OptState st = init_opt_state(p);
    ParamStore q = p;
    train_step(q, st, loss, oc);
    CHECK(st.ema == q);
  }
  SUBCASE("non-finite loss aborts the step") {
    OptimizerConfig oc;
    OptState st = init_opt_state(p);
    ParamStore q = p;
    auto bad = [&](const VarMap& v) {
      LossReport rep = loss(v);
      rep.objective = rep.objective + exp(Var(Tensor::scalar(1000.0)));
      rep.total = rep.objective.value().item();
      return rep;
    };
    StepOutcome out = train_step(q, st, bad, oc);
    CHECK_FALSE(out.applied);
    CHECK(out.error.find("exp") != std::string::npos);
    CHECK(q == p);
    CHECK(st.step == 0);
  }
  SUBCASE("f32 rounding") {
    OptimizerConfig oc;
    oc.lr = 1e-3;
    oc.round_to_f32 = true;
    OptState st = init_opt_state(p);
    ParamStore q = p;
    train_step(q, st, loss, oc);
    for (const auto& [name, t] : q) {
      for (double x : t.data()) CHECK(static_cast<double>(static_cast<float>(x)) == x);
    }
  }
}

TEST_CASE("ema_update") {
  ParamStore s{{"a", Tensor({2}, {1.0, -1.0})}}, p{{"a", Tensor({2}, {3.0, 5.0})}};
  ParamStore s0 = s;
  ema_update(s0, p, 0.0);
  CHECK(s0 == p);
  ParamStore s1 = s;
  ema_update(s1, p, 1.0);
  CHECK(s1 == s);
  // scalar hand recurrence
  ParamStore sh{{"x", Tensor::scalar(0.0)}};
  double ref = 0.0;
  for (int i = 1; i <= 10; ++i) {
    ParamStore cur{{"x", Tensor::scalar(0.1 * i * i)}};
    ema_update(sh, cur, 0.75);
    ref = 0.75 * ref + 0.25 * (0.1 * i * i);
    CHECK(std::abs(sh.at("x").item() - ref) < 1e-15);
  }
  ParamStore other{{"b", Tensor({2})}};
  CHECK_THROWS_AS(ema_update(s, other, 0.5), ContractViolation);
}

TEST_CASE("objective names round-trip") {
  for (Objective o : {Objective::fm, Objective::mf, Objective::v_loss, Objective::imf_boundary,
                      Objective::imf_auxhead}) {
    CHECK(objective_from_string(to_string(o)) == o);
  }
  CHECK_THROWS_AS(objective_from_string("nope"), ContractViolation);
}

TEST_CASE("exact average velocity of a Gaussian makes the compound predictor the marginal velocity") {
  // mu = 0: u(z, r, t) = z (1 - sqrt(s2(r) / s2(t))) / (t - r), s2(tau) = (1 - tau)^2 sigma^2 + tau^2.
  const double sigma = 0.3;
  auto s2 = [&](const Var& tau) {
    Var one_minus = -tau + 1.0;
    return square(one_minus) * (sigma * sigma) + square(tau);
  };
  Field exact = [&](const VarMap&, const Var& z, const CondBatch& c) {
    const std::size_t n = c.size();
    Var r = reshape(c.r, {n, 1}), t = reshape(c.t, {n, 1});
    Var ratio = sqrt(s2(r) / s2(t));
    return z * ((-ratio + 1.0) / (t - r));
  };
  Rng rng(21);
  const std::size_t n = 64;
  Tensor z = random_tensor(rng, {n, 1});
  Tensor t({n}), r({n}), v({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = 0.05 + 0.95 * rng.uniform();
    r[i] = t[i] * 0.95 * rng.uniform();
    const double s = (1 - t[i]) * (1 - t[i]) * sigma * sigma + t[i] * t[i];
    v[i] = (t[i] - (1 - t[i]) * sigma * sigma) / s * z[i];
  }
  Batch b{Tensor({n, 1}), Tensor({n, 1}), std::nullopt};
  CondBatch c = unguided_cond(b, t, r);
  Var u = dual_u(exact, {}, z, v, c);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    worst = std::max(worst, std::abs(u.value()[i] + (t[i] - r[i]) * u.tangent()[i] - v[i]));
  }
  CHECK(worst < 1e-10);
}
