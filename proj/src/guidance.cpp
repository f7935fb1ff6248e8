#include "imf/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

namespace imf {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractViolation(msg);
}

}  // namespace

void OmegaDist::validate() const {
  require(omega_max > 1.0, "guidance.omega_max must be > 1");
  require(beta >= 0.0, "guidance.beta must be >= 0");
}

void GuidanceConfig::validate() const {
  omega.validate();
  require(class_drop >= 0.0 && class_drop <= 1.0, "guidance.class_drop must be in [0, 1]");
}

double sample_omega(Rng& rng, const OmegaDist& dist) {
  dist.validate();
  const double u = rng.uniform();
  double w;
  if (dist.beta == 1.0) {
    w = std::pow(dist.omega_max, u);
  } else {
    const double a = 1.0 - dist.beta;
    w = std::pow(1.0 + u * (std::pow(dist.omega_max, a) - 1.0), 1.0 / a);
  }
  return std::clamp(w, 1.0, dist.omega_max);
}

std::pair<double, double> sample_interval(Rng& rng) {
  const double lo = 0.5 * rng.uniform();
  const double hi = 0.5 + 0.5 * rng.uniform();
  return {lo, hi};
}

double effective_omega(double t, const GuidanceSample& g) {
  return t >= g.t_min && t <= g.t_max ? g.omega : 1.0;
}

Tensor cfg_target(const Tensor& x, const Tensor& e, const Tensor& v_cond, const Tensor& v_uncond,
                  const Tensor& omega) {
  require(x.rank() == 2 && e.shape() == x.shape() && v_cond.shape() == x.shape() && v_uncond.shape() == x.shape(),
          "cfg_target: x, e, v_cond, v_uncond must share a [n, d] shape");
  require(omega.shape() == Shape{x.dim(0)}, "cfg_target: omega must be [n]");
  const std::size_t d = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    require(omega[i] >= 1.0, "cfg_target: omega must be >= 1");
    const double k = 1.0 - 1.0 / omega[i];
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t q = i * d + j;
      out[q] = (e[q] - x[q]) + k * (v_cond[q] - v_uncond[q]);
    }
  }
  return out;
}

GuidedDraw sample_guided(Rng& rng, const Batch& batch, const TimeSamplerConfig& tcfg, const GuidanceConfig& gcfg) {
  batch.validate();
  gcfg.validate();
  const std::size_t n = batch.size();
  const Rng step = rng.fork(rng());
  Rng time_rng = step.fork("time");
  Rng guide_rng = step.fork("guidance");
  Rng drop_rng = step.fork("class_drop");
  const TimePairs tr = sample_t_r(time_rng, n, tcfg);
  Tensor omega({n}), lo({n}), hi({n});
  GuidedDraw draw;
  draw.omega_eff = Tensor({n});
  draw.dropped.resize(n);
  std::vector<int> labels(n, kNullClass);
  for (std::size_t i = 0; i < n; ++i) {
    omega[i] = sample_omega(guide_rng, gcfg.omega);
    std::tie(lo[i], hi[i]) = sample_interval(guide_rng);
    draw.omega_eff[i] = effective_omega(tr.t[i], {omega[i], lo[i], hi[i]});
    draw.dropped[i] = drop_rng.uniform() < gcfg.class_drop;
    if (batch.labels && !draw.dropped[i]) labels[i] = (*batch.labels)[i];
  }
  draw.cond = CondBatch::from_columns(tr.r, tr.t, std::move(labels), omega, lo, hi);
  return draw;
}

LossReport guided_loss(const Model& m, const VarMap& params, const Batch& batch, const GuidedDraw& draw,
                       const AdaptiveWeight& aw) {
  batch.validate();
  const CondBatch& cond = draw.cond;
  require(cond.size() == batch.size(), "guided_loss: draw and batch sizes differ");
  const Tensor z = interpolate(batch.x, batch.e, cond.t.value());
  const VarMap frozen = detach(params);
  const CondBatch boundary = cond.at_boundary();
  const Tensor v_c = m.u(frozen, Var(z), boundary).value();
  CondBatch uncond = boundary;
  uncond.labels.assign(cond.size(), kNullClass);
  const Tensor v_u = uncond.labels == boundary.labels ? v_c : m.u(frozen, Var(z), uncond).value();
  const Tensor v_g = cfg_target(batch.x, batch.e, v_c, v_u, draw.omega_eff);

  Var u = dual_u(m.u, params, z, v_c, cond);
  Tensor gap({cond.size(), 1});
  for (std::size_t i = 0; i < cond.size(); ++i) gap[i] = cond.t.value()[i] - cond.r.value()[i];
  Var V = u + Var(std::move(gap)) * Var(u.tangent());
  WeightedLoss wl = adaptive_weight(V - Var(v_g), aw);
  LossReport rep;
  rep.objective = wl.total;
  rep.total = wl.total.value().item();
  rep.per_sample = std::move(wl.per_sample);
  rep.mask_r_neq_t.resize(cond.size());
  for (std::size_t i = 0; i < cond.size(); ++i) rep.mask_r_neq_t[i] = cond.r.value()[i] != cond.t.value()[i];
  return rep;
}

StepOutcome train_step_guided(ParamStore& params, OptState& state, const Model& m, const Batch& batch, Rng& rng,
                              const TimeSamplerConfig& tcfg, const GuidanceConfig& gcfg, const AdaptiveWeight& aw,
                              const OptimizerConfig& ocfg) {
  const GuidedDraw draw = sample_guided(rng, batch, tcfg, gcfg);
  return train_step(params, state, [&](const VarMap& p) { return guided_loss(m, p, batch, draw, aw); }, ocfg);
}

}  // namespace imf
