#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "imf/autodiff.hpp"

namespace imf {

enum class Arch { mlp, transformer };
enum class ConditioningMode { adaln_zero, in_context };

/// Number of in-context tokens each condition type is replicated into.
struct TokenCounts {
  int class_tokens = 8;
  int time = 4;
  int guidance = 4;
  int interval = 4;
};

struct NetConfig {
  Arch arch = Arch::transformer;
  int depth = 4;
  int width = 128;
  int heads = 4;
  int data_dim = 2;
  /// Transformer only. The MLP backend always concatenates condition
  /// embeddings to its input features.
  ConditioningMode conditioning = ConditioningMode::in_context;
  TokenCounts tokens;
  int aux_head_depth = 0;
  int num_classes = 0;
  /// Number of sinusoidal features per embedded scalar (even).
  int embed_dim = 64;
  /// Adds (omega, t_min, t_max) embeddings.
  bool omega_conditioning = false;
  int mlp_ratio = 4;
  /// Highest sinusoid frequency (radians per unit of the embedded scalar).
  double embed_max_freq = 30.0;
  /// Ratio between the highest and lowest sinusoid frequency.
  double embed_freq_span = 1000.0;

  /// Throws ContractViolation naming the offending field.
  void validate() const;
};

inline constexpr int kNullClass = -1;

/// Conditioning of a single network evaluation: (r, t, class, omega, t_min, t_max).
struct ConditionSet {
  double r = 0.0;
  double t = 1.0;
  std::optional<int> class_label;
  double omega = 1.0;
  double t_min = 0.0;
  double t_max = 1.0;

  void validate() const;
};

/// Conditioning for a batch of n evaluations. Scalar columns are [n] Vars so
/// a dual pass can attach tangents to any of them; labels use kNullClass for
/// the unconditional case.
struct CondBatch {
  Var r, t, omega, t_min, t_max;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }

  static CondBatch repeat(const ConditionSet& c, std::size_t n);
  static CondBatch from_columns(const Tensor& r, const Tensor& t, std::vector<int> labels,
                                const Tensor& omega, const Tensor& t_min, const Tensor& t_max);
  /// Same batch with r replaced by t (boundary slice).
  CondBatch at_boundary() const;
};

enum class InitKind { fan_in_normal, table_normal, zero };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init;
};

/// Every parameter the configuration implies, in construction order.
std::vector<ParamSpec> param_layout(const NetConfig& cfg);

/// Exact scalar parameter count; `inference_only` drops the auxiliary head.
std::size_t count_params(const NetConfig& cfg, bool inference_only = false);

/// Residual scales and adaLN modulations start at zero; other linear
/// weights are N(0, 0.1 / fan_in); biases zero. Each tensor draws from its
/// own stream keyed by (seed, name).
ParamStore init_params(const NetConfig& cfg, std::uint64_t seed);

bool is_aux_param(const std::string& name);
/// Drops auxiliary-head parameters.
ParamStore inference_params(const ParamStore& params);

/// Sinusoidal features [sin f0 s, cos f0 s, sin f1 s, ...] of values [n] -> [n, dim].
Var sinusoidal_features(const Var& values, int dim, double max_freq, double freq_span);

/// Sinusoidal features followed by the learned 2-layer MLP named `embed.<name>`.
Var embed_scalar(const NetConfig& cfg, const VarMap& params, const std::string& name, const Var& values);

/// Condition tokens [n, T_cond, width] in the fixed order class, time,
/// guidance, interval. In-context transformers only.
Var build_condition_tokens(const NetConfig& cfg, const VarMap& params, const CondBatch& cond);

/// Average-velocity prediction u(z | r, t, c, Omega); z is [n, data_dim].
Var forward_u(const NetConfig& cfg, const VarMap& params, const Var& z, const CondBatch& cond);

/// u(z | t, t, ...) : the boundary slice used as instantaneous velocity.
Var forward_v_boundary(const NetConfig& cfg, const VarMap& params, const Var& z, const CondBatch& cond);

/// Auxiliary v-head: shared trunk evaluated at r = t, then unshared blocks and
/// output projection. Requires aux_head_depth > 0.
Var forward_v_auxhead(const NetConfig& cfg, const VarMap& params, const Var& z, const CondBatch& cond);

/// Activations after the shared blocks (the aux-head fork point).
Var forward_trunk(const NetConfig& cfg, const VarMap& params, const Var& z, const CondBatch& cond);

/// Convenience: evaluate u on plain tensors with a single shared condition.
Tensor predict_u(const NetConfig& cfg, const ParamStore& params, const Tensor& z, const ConditionSet& cond);

}  // namespace imf
