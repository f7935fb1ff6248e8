#include "imf/optim.hpp"

#include <cmath>

namespace imf {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractViolation(msg);
}

void check_same_keys(const ParamStore& a, const ParamStore& b, const char* what) {
  require(a.size() == b.size(), std::string(what) + ": parameter sets differ in size");
  auto ib = b.begin();
  for (const auto& [name, t] : a) {
    require(ib->first == name, std::string(what) + ": parameter '" + name + "' has no counterpart");
    require(ib->second.shape() == t.shape(), std::string(what) + ": shape mismatch for '" + name + "'");
    ++ib;
  }
}

ParamStore zeros_like(const ParamStore& p) {
  ParamStore out;
  for (const auto& [name, t] : p) out.emplace(name, Tensor(t.shape()));
  return out;
}

}  // namespace

void OptimizerConfig::validate() const {
  require(lr >= 0, "optimizer.lr must be >= 0");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "optimizer.betas must be in [0, 1)");
  require(eps > 0, "optimizer.eps must be > 0");
  require(weight_decay >= 0, "optimizer.weight_decay must be >= 0");
  require(ema_decay >= 0 && ema_decay <= 1, "optimizer.ema_decay must be in [0, 1]");
  require(cooldown_steps <= total_steps, "optimizer cooldown longer than the run");
}

OptState init_opt_state(const ParamStore& params) {
  OptState s;
  s.m = zeros_like(params);
  s.v = zeros_like(params);
  s.ema = params;
  return s;
}

double learning_rate(const OptimizerConfig& cfg, std::uint64_t step) {
  double lr = cfg.lr;
  if (step < cfg.warmup_steps) lr *= static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  if (cfg.cooldown_steps > 0 && step + cfg.cooldown_steps >= cfg.total_steps) {
    // last update runs at lr / cooldown_steps
    const std::uint64_t left = cfg.total_steps > step ? cfg.total_steps - step : 0;
    lr *= static_cast<double>(left) / static_cast<double>(cfg.cooldown_steps);
  }
  return lr;
}

void ema_update(ParamStore& shadow, const ParamStore& params, double decay) {
  check_same_keys(shadow, params, "ema_update");
  for (auto& [name, s] : shadow) {
    const Tensor& p = params.at(name);
    for (std::size_t i = 0; i < s.numel(); ++i) s[i] = decay * s[i] + (1.0 - decay) * p[i];
  }
}

void adam_update(ParamStore& params, OptState& state, const ParamStore& grads, const OptimizerConfig& cfg) {
  check_same_keys(params, grads, "adam_update");
  const double lr = learning_rate(cfg, state.step);
  const std::uint64_t t = state.step + 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (auto& [name, p] : params) {
    const Tensor& g = grads.at(name);
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p[i]);
      if (cfg.round_to_f32) p[i] = static_cast<double>(static_cast<float>(p[i]));
    }
  }
  state.step = t;
  ema_update(state.ema, params, cfg.ema_decay);
  if (cfg.round_to_f32) {
    for (auto& [name, t] : state.ema) {
      for (double& x : t.data()) x = static_cast<double>(static_cast<float>(x));
    }
  }
}

StepOutcome train_step(ParamStore& params, OptState& state, const LossFn& loss, const OptimizerConfig& cfg) {
  cfg.validate();
  StepOutcome out;
  ParamStore grads;
  try {
    Tape tape;
    VarMap vars = watch(tape, params);
    out.report = loss(vars);
    if (!std::isfinite(out.report.total)) throw NumericFailure("loss is not finite");
    grads = gradients(tape, out.report.objective, vars);
  } catch (const NumericFailure& e) {
    out.error = e.what();
    return out;
  }
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) {
      out.error = "non-finite gradient for '" + name + "'";
      return out;
    }
  }
  adam_update(params, state, grads, cfg);
  out.applied = true;
  return out;
}

}  // namespace imf
