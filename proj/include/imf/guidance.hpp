#pragma once

#include <utility>

#include "imf/objectives.hpp"
#include "imf/optim.hpp"

namespace imf {

/// p(omega) proportional to omega^-beta on [1, omega_max].
struct OmegaDist {
  double omega_max = 8.0;
  double beta = 1.0;

  void validate() const;
};

struct GuidanceSample {
  double omega = 1.0;
  double t_min = 0.0;
  double t_max = 1.0;
};

struct GuidanceConfig {
  OmegaDist omega;
  double class_drop = 0.1;

  void validate() const;
};

double sample_omega(Rng& rng, const OmegaDist& dist);
/// (t_min, t_max) ~ U[0, 0.5] x U[0.5, 1].
std::pair<double, double> sample_interval(Rng& rng);

/// omega inside the closed interval [t_min, t_max], 1 outside.
double effective_omega(double t, const GuidanceSample& g);

/// v_g = (e - x) + (1 - 1/omega) (v_cond - v_uncond), omega per sample [n].
Tensor cfg_target(const Tensor& x, const Tensor& e, const Tensor& v_cond, const Tensor& v_uncond,
                  const Tensor& omega);

/// Per-step random draws of a guided step.
struct GuidedDraw {
  CondBatch cond;        // labels after class drop; raw omega and interval
  Tensor omega_eff;      // [n], interval-gated omega used by the target
  std::vector<bool> dropped;
};

GuidedDraw sample_guided(Rng& rng, const Batch& batch, const TimeSamplerConfig& tcfg, const GuidanceConfig& gcfg);

/// Guided compound loss: tangent v_c, target v_g.
LossReport guided_loss(const Model& m, const VarMap& params, const Batch& batch, const GuidedDraw& draw,
                       const AdaptiveWeight& aw);

/// Draws (t, r, omega, interval, class drop), then one optimizer step on
/// guided_loss.
StepOutcome train_step_guided(ParamStore& params, OptState& state, const Model& m, const Batch& batch, Rng& rng,
                              const TimeSamplerConfig& tcfg, const GuidanceConfig& gcfg, const AdaptiveWeight& aw,
                              const OptimizerConfig& ocfg);

}  // namespace imf
