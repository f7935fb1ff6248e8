#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "imf/autodiff.hpp"
#include "imf/nets.hpp"
#include "imf/rng.hpp"

namespace imf {

/// Training batch: data x, prior noise e, optional class labels.
struct Batch {
  Tensor x;
  Tensor e;
  std::optional<std::vector<int>> labels;

  std::size_t size() const { return x.rank() > 0 ? x.dim(0) : 0; }
  void validate() const;
};

struct TimeSamplerConfig {
  double mu = -0.4;
  double sigma = 1.0;
  double ratio_r_neq_t = 0.5;

  void validate() const;
};

struct TimePairs {
  Tensor t;  // [n]
  Tensor r;  // [n], r <= t
};

/// Logit-normal pairs sorted so r <= t, then r := t with probability
/// 1 - ratio_r_neq_t.
TimePairs sample_t_r(Rng& rng, std::size_t n, const TimeSamplerConfig& cfg);

/// z = (1 - t) x + t e with per-sample t [n].
Tensor interpolate(const Tensor& x, const Tensor& e, const Tensor& t);

/// w_i = 1 / (||err_i||^2 + c)^p, treated as a constant.
struct AdaptiveWeight {
  double p = 1.0;
  double c = 1e-3;

  void validate() const;
};

struct WeightedLoss {
  Var total;           // mean_i w_i ||err_i||^2
  Tensor per_sample;   // ||err_i||^2
};

WeightedLoss adaptive_weight(const Var& err, const AdaptiveWeight& cfg);

struct LossReport {
  Var objective;       // differentiable scalar the optimizer minimizes
  double total = 0.0;  // objective value
  Tensor per_sample;   // unweighted squared error of the main term
  std::vector<bool> mask_r_neq_t;
  double aux_total = 0.0;  // auxiliary FM term (aux-head mode only)
};

/// A velocity field as the objectives see it. The network is one
/// implementation; tests substitute closed-form stubs.
using Field = std::function<Var(const VarMap& params, const Var& z, const CondBatch& cond)>;

struct Model {
  Field u;
  Field v_aux;  // empty unless the network has an auxiliary head
};

Model make_model(const NetConfig& cfg);

enum class VMode { boundary, aux_head };
enum class Objective { fm, mf, v_loss, imf_boundary, imf_auxhead };

/// Conditions for an unguided step: batch labels (or null class), omega = 1,
/// full interval.
CondBatch unguided_cond(const Batch& batch, const Tensor& t, const Tensor& r);

/// Untracked view of a parameter map (same values, no gradient).
VarMap detach(const VarMap& params);

/// u(z) together with du/dt along (dz, dr, dt) = (tangent, 0, 1). Other
/// condition inputs carry no tangent.
Var dual_u(const Field& u, const VarMap& params, const Tensor& z, const Tensor& tangent, const CondBatch& cond);

LossReport fm_loss(const Model& m, const VarMap& params, const Batch& batch, const CondBatch& cond, VMode mode,
                   const AdaptiveWeight& aw);
LossReport mf_loss(const Model& m, const VarMap& params, const Batch& batch, const CondBatch& cond,
                   const AdaptiveWeight& aw);
LossReport v_loss_mf_reparam(const Model& m, const VarMap& params, const Batch& batch, const CondBatch& cond,
                             const AdaptiveWeight& aw);
LossReport imf_loss(const Model& m, const VarMap& params, const Batch& batch, const CondBatch& cond, VMode mode,
                    const AdaptiveWeight& aw);

/// Dispatch on the objective selector.
LossReport objective_loss(Objective obj, const Model& m, const VarMap& params, const Batch& batch,
                          const CondBatch& cond, const AdaptiveWeight& aw);

std::string to_string(Objective obj);
Objective objective_from_string(const std::string& name);

}  // namespace imf
