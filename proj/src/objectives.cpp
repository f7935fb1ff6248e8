#include "imf/objectives.hpp"

#include <cmath>

namespace imf {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractViolation(msg);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<bool> neq_mask(const CondBatch& cond) {
  std::vector<bool> mask(cond.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = cond.r.value()[i] != cond.t.value()[i];
  return mask;
}

Tensor velocity_target(const Batch& b) {
  Tensor v(b.x.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = b.e[i] - b.x[i];
  return v;
}

Tensor interval_gap(const CondBatch& cond) {
  Tensor gap({cond.size(), 1});
  for (std::size_t i = 0; i < cond.size(); ++i) gap[i] = cond.t.value()[i] - cond.r.value()[i];
  return gap;
}

LossReport finish(WeightedLoss main, const CondBatch& cond) {
  LossReport rep;
  rep.objective = main.total;
  rep.total = main.total.value().item();
  rep.per_sample = std::move(main.per_sample);
  rep.mask_r_neq_t = neq_mask(cond);
  return rep;
}

Tensor z_of(const Batch& batch, const CondBatch& cond) {
  batch.validate();
  require(cond.size() == batch.size(), "condition batch size does not match data batch");
  return interpolate(batch.x, batch.e, cond.t.value());
}

// V = u + (t - r) * sg(du/dt) with tangent v, regressed on e - x.
LossReport compound_loss(const Model& m, const VarMap& params, const Batch& batch, const CondBatch& cond,
                         const Tensor& tangent, const AdaptiveWeight& aw) {
  const Tensor z = z_of(batch, cond);
  Var u = dual_u(m.u, params, z, tangent, cond);
  Var V = u + Var(interval_gap(cond)) * Var(u.tangent());
  return finish(adaptive_weight(V - Var(velocity_target(batch)), aw), cond);
}

}  // namespace

void Batch::validate() const {
  require(x.rank() == 2, "batch.x must be [n, d], got " + shape_str(x.shape()));
  require(e.shape() == x.shape(), "batch.e shape " + shape_str(e.shape()) + " != batch.x " + shape_str(x.shape()));
  require(!labels || labels->size() == x.dim(0), "batch.labels length must equal batch size");
}

void TimeSamplerConfig::validate() const {
  require(sigma > 0, "time_sampler.sigma must be > 0");
  require(ratio_r_neq_t >= 0 && ratio_r_neq_t <= 1, "time_sampler.ratio_r_neq_t must be in [0, 1]");
}

TimePairs sample_t_r(Rng& rng, std::size_t n, const TimeSamplerConfig& cfg) {
  cfg.validate();
  TimePairs out{Tensor({n}), Tensor({n})};
  for (std::size_t i = 0; i < n; ++i) {
    const double a = sigmoid(cfg.mu + cfg.sigma * rng.normal());
    const double b = sigmoid(cfg.mu + cfg.sigma * rng.normal());
    out.t[i] = std::max(a, b);
    out.r[i] = std::min(a, b);
    if (rng.uniform() >= cfg.ratio_r_neq_t) out.r[i] = out.t[i];
  }
  return out;
}

Tensor interpolate(const Tensor& x, const Tensor& e, const Tensor& t) {
  require(x.shape() == e.shape() && x.rank() == 2, "interpolate: x and e must be matching [n, d]");
  require(t.shape() == Shape{x.dim(0)}, "interpolate: t must be [n]");
  Tensor z(x.shape());
  const std::size_t d = x.dim(1);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    for (std::size_t k = 0; k < d; ++k) z[i * d + k] = (1.0 - t[i]) * x[i * d + k] + t[i] * e[i * d + k];
  }
  return z;
}

void AdaptiveWeight::validate() const {
  require(c > 0, "adaptive_weight.c must be > 0");
  require(p >= 0, "adaptive_weight.p must be >= 0");
}

WeightedLoss adaptive_weight(const Var& err, const AdaptiveWeight& cfg) {
  cfg.validate();
  require(err.shape().size() == 2, "adaptive_weight expects err of shape [n, d]");
  Var sq = sum(square(err), 1);
  const Tensor& s = sq.value();
  Tensor w(s.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = cfg.p == 0.0 ? 1.0 : std::pow(s[i] + cfg.c, -cfg.p);
  return {mean_all(sq * Var(std::move(w))), s};
}

Model make_model(const NetConfig& cfg) {
  Model m;
  m.u = [cfg](const VarMap& p, const Var& z, const CondBatch& c) { return forward_u(cfg, p, z, c); };
  if (cfg.aux_head_depth > 0) {
    m.v_aux = [cfg](const VarMap& p, const Var& z, const CondBatch& c) { return forward_v_auxhead(cfg, p, z, c); };
  }
  return m;
}

CondBatch unguided_cond(const Batch& batch, const Tensor& t, const Tensor& r) {
  const std::size_t n = batch.size();
  std::vector<int> labels = batch.labels ? *batch.labels : std::vector<int>(n, kNullClass);
  return CondBatch::from_columns(r, t, std::move(labels), Tensor::full({n}, 1.0), Tensor::zeros({n}),
                                 Tensor::full({n}, 1.0));
}

VarMap detach(const VarMap& params) {
  VarMap out;
  for (const auto& [name, v] : params) out.emplace(name, stopgrad(v));
  return out;
}

Var dual_u(const Field& u, const VarMap& params, const Tensor& z, const Tensor& tangent, const CondBatch& cond) {
  CondBatch c = cond;
  const Shape s{cond.size()};
  c.t = Var(cond.t.value(), Tensor::full(s, 1.0));
  c.r = Var(cond.r.value(), Tensor::zeros(s));
  c.omega = stopgrad(cond.omega);
  c.t_min = stopgrad(cond.t_min);
  c.t_max = stopgrad(cond.t_max);
  return u(params, Var(z, tangent), c);
}

LossReport fm_loss(const Model& m, const VarMap& params, const Batch& batch, const CondBatch& cond, VMode mode,
                   const AdaptiveWeight& aw) {
  const Tensor z = z_of(batch, cond);
  Var v;
  if (mode == VMode::aux_head) {
    require(static_cast<bool>(m.v_aux), "fm_loss: model has no auxiliary head");
    v = m.v_aux(params, Var(z), cond);
  } else {
    v = m.u(params, Var(z), cond.at_boundary());
  }
  return finish(adaptive_weight(v - Var(velocity_target(batch)), aw), cond);
}

LossReport mf_loss(const Model& m, const VarMap& params, const Batch& batch, const CondBatch& cond,
                   const AdaptiveWeight& aw) {
  const Tensor z = z_of(batch, cond);
  const Tensor v = velocity_target(batch);
  Var u = dual_u(m.u, params, z, v, cond);
  const Tensor gap = interval_gap(cond);
  Tensor target(v.shape());
  const std::size_t d = v.dim(1);
  for (std::size_t i = 0; i < target.numel(); ++i) target[i] = v[i] - gap[i / d] * u.tangent()[i];
  return finish(adaptive_weight(u - Var(std::move(target)), aw), cond);
}

LossReport v_loss_mf_reparam(const Model& m, const VarMap& params, const Batch& batch, const CondBatch& cond,
                             const AdaptiveWeight& aw) {
  return compound_loss(m, params, batch, cond, velocity_target(batch), aw);
}

LossReport imf_loss(const Model& m, const VarMap& params, const Batch& batch, const CondBatch& cond, VMode mode,
                    const AdaptiveWeight& aw) {
  const Tensor z = z_of(batch, cond);
  if (mode == VMode::boundary) {
    const Tensor v = m.u(detach(params), Var(z), cond.at_boundary()).value();
    return compound_loss(m, params, batch, cond, v, aw);
  }
  require(static_cast<bool>(m.v_aux), "imf_loss: aux_head mode needs a model with an auxiliary head");
  Var v = m.v_aux(params, Var(z), cond);
  LossReport rep = compound_loss(m, params, batch, cond, v.value(), aw);
  WeightedLoss aux = adaptive_weight(v - Var(velocity_target(batch)), aw);
  rep.aux_total = aux.total.value().item();
  rep.objective = rep.objective + aux.total;
  rep.total = rep.objective.value().item();
  return rep;
}

LossReport objective_loss(Objective obj, const Model& m, const VarMap& params, const Batch& batch,
                          const CondBatch& cond, const AdaptiveWeight& aw) {
  switch (obj) {
    case Objective::fm:
      return fm_loss(m, params, batch, cond, VMode::boundary, aw);
    case Objective::mf:
      return mf_loss(m, params, batch, cond, aw);
    case Objective::v_loss:
      return v_loss_mf_reparam(m, params, batch, cond, aw);
    case Objective::imf_boundary:
      return imf_loss(m, params, batch, cond, VMode::boundary, aw);
    case Objective::imf_auxhead:
      return imf_loss(m, params, batch, cond, VMode::aux_head, aw);
  }
  throw ContractViolation("unknown objective");
}

std::string to_string(Objective obj) {
  switch (obj) {
    case Objective::fm: return "fm";
    case Objective::mf: return "mf";
    case Objective::v_loss: return "v_loss";
    case Objective::imf_boundary: return "imf_boundary";
    case Objective::imf_auxhead: return "imf_auxhead";
  }
  return "?";
}

Objective objective_from_string(const std::string& name) {
  for (Objective o : {Objective::fm, Objective::mf, Objective::v_loss, Objective::imf_boundary,
                      Objective::imf_auxhead}) {
    if (to_string(o) == name) return o;
  }
  throw ContractViolation("unknown objective '" + name + "'");
}

}  // namespace imf
