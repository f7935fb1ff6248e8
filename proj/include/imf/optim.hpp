#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "imf/autodiff.hpp"
#include "imf/objectives.hpp"

namespace imf {

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Linear warmup length in steps (0 = none).
  std::uint64_t warmup_steps = 0;
  /// Optional linear decay to zero over the last `cooldown_steps` of
  /// `total_steps` updates (0 = constant lr after warmup).
  std::uint64_t cooldown_steps = 0;
  std::uint64_t total_steps = 0;
  double ema_decay = 0.9999;
  /// Round parameters and EMA to float32 after every update.
  bool round_to_f32 = false;

  void validate() const;
};

struct OptState {
  std::uint64_t step = 0;  // completed updates
  ParamStore m;
  ParamStore v;
  ParamStore ema;
};

OptState init_opt_state(const ParamStore& params);

/// Learning rate applied on update number `step` (0-based).
double learning_rate(const OptimizerConfig& cfg, std::uint64_t step);

/// shadow = decay * shadow + (1 - decay) * params, per tensor.
void ema_update(ParamStore& shadow, const ParamStore& params, double decay);

/// One bias-corrected Adam update (decoupled weight decay) followed by the
/// EMA update.
void adam_update(ParamStore& params, OptState& state, const ParamStore& grads, const OptimizerConfig& cfg);

using LossFn = std::function<LossReport(const VarMap& params)>;

struct StepOutcome {
  LossReport report;
  bool applied = false;
  std::string error;  // set when the step was aborted
};

/// Evaluate the loss on a fresh tape, backpropagate, and apply Adam. A
/// non-finite loss or gradient aborts the step and leaves params and state
/// untouched.
StepOutcome train_step(ParamStore& params, OptState& state, const LossFn& loss, const OptimizerConfig& cfg);

}  // namespace imf
